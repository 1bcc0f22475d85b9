"""Command-line driver: simulate, stats, solve, evaluate, render, pipeline.

Configuration is a flat ``key = value`` file with ``#`` comments and dotted
section keys (``solver.max_iterations = 50``). ``--set key=value`` flags
override file values. Exit status: 0 success, 2 configuration error,
3 I/O or format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import evaluation, measure, sfw, simulate, temporal
from .measure import SpikeFileError
from .operators import FWHM_PER_SIGMA, PsfModel
from .temporal import StackFormatError

log = logging.getLogger("flucsr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


# --- configuration ---------------------------------------------------------------

KNOWN_KEYS = {
    "pixel_size_nm", "psf_fwhm_nm", "grid.height", "grid.width",
    "problem.kind", "problem.lambda_fraction", "problem.lambda", "problem.nonnegative",
    "problem.background",
    "solver.max_iterations", "solver.certificate_tolerance", "solver.insertion_grid_factor",
    "solver.lasso_tolerance", "solver.slide_max_evals", "solver.amplitude_prune_threshold",
    "sim.frames", "sim.frame_rate", "sim.seed", "sim.ground_truth", "sim.layout", "sim.emitters",
    "photo.tau_on_ms", "photo.tau_off_ms", "photo.tau_bleach_s", "photo.photons_on",
    "noise.background", "noise.gaussian_snr_db", "noise.poisson",
    "render.upscale", "render.sigma", "eval.radius",
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        values[key] = value
    return values


def load_config(path: Optional[str], overrides=()) -> Dict[str, str]:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    for item in overrides:
        values.update(parse_config_text(item, "--set"))
    return values


@dataclass
class RunConfig:
    """Typed view of the flat configuration with defaults applied."""

    raw: Dict[str, str] = field(default_factory=dict)
    used: Dict[str, str] = field(default_factory=dict)

    def _get(self, key, conv, default=None, required=False):
        if key in self.raw:
            text = self.raw[key]
            try:
                value = conv(text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, f"invalid value {text!r} ({exc})") from None
        elif required:
            raise ConfigError(key, "missing required key")
        else:
            value = default
        self.used[key] = _show(value)
        return value

    def positive(self, key, conv=float, default=None, required=False):
        v = self._get(key, conv, default, required)
        if v is not None and not v > 0:
            raise ConfigError(key, f"must be positive, got {v}")
        return v

    def nonnegative(self, key, conv=float, default=None):
        v = self._get(key, conv, default)
        if v is not None and not v >= 0:
            raise ConfigError(key, f"must be nonnegative, got {v}")
        return v

    # -- sections --

    def psf(self) -> PsfModel:
        pixel = self.positive("pixel_size_nm", required=True)
        fwhm = self.positive("psf_fwhm_nm", required=True)
        h = self.positive("grid.height", _int, required=True)
        w = self.positive("grid.width", _int, required=True)
        sigma = fwhm / (FWHM_PER_SIGMA * pixel)
        self.used["sigma_px"] = repr(sigma)
        return PsfModel(sigma, h, w)

    def problem_kind(self) -> sfw.ProblemKind:
        def conv(s):
            return sfw.ProblemKind(s.lower())
        return self._get("problem.kind", conv, sfw.ProblemKind.COVARIANCE)

    def lambda_setting(self):
        has_frac = "problem.lambda_fraction" in self.raw
        has_abs = "problem.lambda" in self.raw
        if has_frac and has_abs:
            raise ConfigError("problem.lambda", "set exactly one of problem.lambda_fraction / problem.lambda")
        if has_abs:
            return "absolute", self.positive("problem.lambda")
        frac = self._get("problem.lambda_fraction", float, 0.1)
        if not 0 < frac <= 1:
            raise ConfigError("problem.lambda_fraction", f"must lie in (0, 1], got {frac}")
        return "fraction", frac

    def nonneg(self):
        def conv(s):
            return None if s.lower() == "auto" else _bool(s)
        return self._get("problem.nonnegative", conv, None)

    def solver_options(self) -> sfw.SolverOptions:
        d = sfw.SolverOptions()
        return sfw.SolverOptions(
            max_iterations=self.positive("solver.max_iterations", _int, d.max_iterations),
            certificate_tolerance=self.positive("solver.certificate_tolerance", float,
                                                d.certificate_tolerance),
            insertion_grid_factor=self.positive("solver.insertion_grid_factor", _int,
                                                d.insertion_grid_factor),
            lasso_tolerance=self.positive("solver.lasso_tolerance", float, d.lasso_tolerance),
            slide_max_evals=self.nonnegative("solver.slide_max_evals", _int, d.slide_max_evals),
            amplitude_prune_threshold=self.nonnegative("solver.amplitude_prune_threshold", float,
                                                       d.amplitude_prune_threshold),
        )

    def simulation(self, psf: PsfModel) -> simulate.SimulationConfig:
        photo = simulate.PhotoPhysics(
            tau_on=self.positive("photo.tau_on_ms", float, 20.0) / 1e3,
            tau_off=self.positive("photo.tau_off_ms", float, 40.0) / 1e3,
            tau_bleach=self.positive("photo.tau_bleach_s", float, 20.0),
            photons_on=self.positive("photo.photons_on", float, 1000.0),
        )
        noise = simulate.NoiseModel(
            background_photons=self.nonnegative("noise.background", float, 100.0),
            gaussian_snr_db=self._get("noise.gaussian_snr_db", _optional_float, 20.0),
            poisson_enabled=self._get("noise.poisson", _bool, True),
        )
        seed = self._get("sim.seed", _int, 0)
        truth_path = self._get("sim.ground_truth", str, None)
        if truth_path is not None:
            try:
                truth = measure.read_spikes(truth_path)
            except OSError as exc:
                raise ConfigError("sim.ground_truth", f"cannot read {truth_path}: {exc}") from None
            if not truth.inside(psf.domain):
                raise ConfigError("sim.ground_truth", "spikes outside the image domain")
        else:
            layout = self._get("sim.layout", str, "random")
            n = self.positive("sim.emitters", _int, 10)
            if layout == "random":
                truth = simulate.random_emitters(n, psf.width, psf.height, seed)
            elif layout == "filaments":
                truth = simulate.crossing_filaments(n, psf.width, psf.height)
            else:
                raise ConfigError("sim.layout", f"expected 'random' or 'filaments', got {layout!r}")
        return simulate.SimulationConfig(
            ground_truth=truth, psf=psf, photo=photo, noise=noise,
            n_frames=self.positive("sim.frames", _int, 1000),
            frame_rate=self.positive("sim.frame_rate", float, 100.0),
            rng_seed=seed)


def _int(s):
    f = float(s)
    if not f.is_integer():
        raise ValueError("not an integer")
    return int(f)


def _bool(s):
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean")


def _optional_float(s):
    return None if str(s).strip().lower() in ("off", "none", "disabled") else float(s)


def _show(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def write_meta(directory, section: str, entries: Dict[str, str]) -> None:
    """Replace ``[section]`` in ``<directory>/run.meta``, keeping other sections."""
    path = Path(directory) / "run.meta"
    sections = {}
    if path.exists():
        current = None
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is not None and line:
                sections[current].append(line)
    sections[section] = [f"{k}={v}" for k, v in entries.items()]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, lines in sections.items():
            fh.write(f"[{name}]\n")
            for line in lines:
                fh.write(line + "\n")


# --- subcommands ---------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, stack_path, truth_path):
    psf = cfg.psf()
    sc = cfg.simulation(psf)
    traces = simulate.simulate_amplitude_traces(sc)
    stack = simulate.simulate_stack(sc, traces)
    temporal.write_stack(stack_path, stack)
    measure.write_spikes(truth_path, sc.ground_truth)
    snr = simulate.snr_db(stack, simulate.noiseless_signal(sc, traces)) if len(sc.ground_truth) else float("nan")
    print(f"wrote {stack_path} (T={sc.n_frames} H={psf.height} W={psf.width}), "
          f"{len(sc.ground_truth)} emitters, SNR {snr:.2f} dB")
    meta = dict(cfg.used, stack=str(stack_path), truth=str(truth_path), snr_db=repr(snr))
    write_meta(Path(stack_path).parent, "simulate", meta)
    return snr


def cmd_stats(stack_path, mean_path, cov_path):
    stack = temporal.read_stack(stack_path)
    h, w = stack.shape
    mean = temporal.empirical_mean(stack)
    temporal.write_stack(mean_path, mean.reshape(1, h, w), dtype="f64")
    cov = temporal.empirical_covariance(stack)
    temporal.write_covariance(cov_path, cov, h, w)
    print(f"wrote {mean_path} and {cov_path} from T={stack.n_frames} frames")
    write_meta(Path(mean_path).parent, "stats",
               {"stack": str(stack_path), "mean": str(mean_path), "covariance": str(cov_path)})


def load_problem_data(kind: sfw.ProblemKind, data_path, psf: PsfModel):
    """Mean image or covariance for ``kind`` from a container file."""
    container = temporal.sniff_container(data_path)
    if container == "covariance":
        if kind is not sfw.ProblemKind.COVARIANCE:
            raise ConfigError("problem.kind", f"{data_path} holds a covariance, problem is '{kind.value}'")
        cov, (h, w) = temporal.read_covariance(data_path)
        _check_grid(psf, h, w, data_path)
        return cov
    stack = temporal.read_stack(data_path)
    _check_grid(psf, *stack.shape, data_path)
    if kind is sfw.ProblemKind.MEAN:
        return temporal.empirical_mean(stack)
    if stack.n_frames < 2:
        raise ConfigError("problem.kind", f"{data_path} holds a single image, covariance needs a stack")
    return temporal.empirical_covariance(stack)


def _check_grid(psf, h, w, path):
    if (h, w) != (psf.height, psf.width):
        raise ConfigError("grid.height", f"data {path} is {h}x{w}, config grid is "
                                         f"{psf.height}x{psf.width}")


def cmd_solve(cfg: RunConfig, data_path, out_csv, log_path):
    psf = cfg.psf()
    kind = cfg.problem_kind()
    data = load_problem_data(kind, data_path, psf)
    if kind is sfw.ProblemKind.MEAN:
        data = data - cfg.nonnegative("problem.background", float, 0.0)
    nonneg = cfg.nonneg()
    opts = cfg.solver_options()
    mode, value = cfg.lambda_setting()
    lmax = sfw.lambda_max(kind, data, psf, nonneg, opts.insertion_grid_factor, max(opts.slide_max_evals, 1))
    lam = value if mode == "absolute" else value * lmax
    meta = dict(cfg.used, data=str(data_path), output=str(out_csv), log=str(log_path),
                lambda_max=repr(lmax), **{"lambda": repr(lam)})
    if not lam > 0:
        # zero data: every positive weight gives the empty measure
        lam = 1.0
        meta["lambda"] = repr(lam)
    m, report = sfw.solve(sfw.ProblemInstance(kind, data, psf, lam, nonneg), opts)
    measure.write_spikes(out_csv, m)
    report.write_log(log_path)
    meta.update(termination=report.termination.value, spikes=str(len(m)),
                final_certificate=repr(report.final_certificate))
    write_meta(Path(out_csv).parent, "solve", meta)
    print(f"{report.termination.value}: {len(m)} spikes, lambda={lam:.6g} "
          f"(lambda_max={lmax:.6g}), max eta={report.final_certificate:.6g}")
    return m, report


def cmd_evaluate(truth_path, recon_path, radius, out_path):
    truth = measure.read_spikes(truth_path)
    recon = measure.read_spikes(recon_path)
    values = evaluation.metrics(truth, recon, radius)
    text = evaluation.format_report(values)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return values


def cmd_render(cfg: RunConfig, spikes_path, out_path):
    psf = cfg.psf()
    m = measure.read_spikes(spikes_path)
    up = cfg.positive("render.upscale", _int, 4)
    rs = cfg.positive("render.sigma", float, 1.0)
    img = evaluation.render_measure(m, psf, up, rs)
    try:
        lo, hi = evaluation.write_pgm16(out_path, img)
    except OSError as exc:
        raise OSError(f"cannot write {out_path}: {exc}") from None
    print(f"wrote {out_path} ({img.shape[1]}x{img.shape[0]}), scale min={lo!r} max={hi!r}")
    write_meta(Path(out_path).parent, "render",
               dict(cfg.used, spikes=str(spikes_path), output=str(out_path),
                    pgm_min=repr(lo), pgm_max=repr(hi)))
    return lo, hi


def default_radius(cfg: RunConfig) -> float:
    if "eval.radius" in cfg.raw:
        return cfg.positive("eval.radius")
    return 0.5 * cfg.psf().sigma


def cmd_pipeline(cfg: RunConfig, outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    stack, truth = out / "stack.flstk", out / "truth.csv"
    mean, cov = out / "mean.flstk", out / "cov.flcov"
    recon, solve_log = out / "recon.csv", out / "solve.log"
    report = out / "metrics.txt"
    cmd_simulate(cfg, stack, truth)
    cmd_stats(stack, mean, cov)
    kind = cfg.problem_kind()
    cmd_solve(cfg, cov if kind is sfw.ProblemKind.COVARIANCE else mean, recon, solve_log)
    cmd_evaluate(truth, recon, default_radius(cfg), report)
    lo, hi = cmd_render(cfg, recon, out / "recon.pgm")
    with open(report, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(f"render_min={lo!r}\nrender_max={hi!r}\n")
    cmd_render(cfg, truth, out / "truth.pgm")


def cmd_convert_tiff(tiff_path, out_path):
    try:
        from PIL import Image, ImageSequence
    except ImportError:
        raise ConfigError("convert", "Pillow is required to read TIFF files") from None
    with Image.open(tiff_path) as im:
        frames = [np.asarray(page, dtype=float) for page in ImageSequence.Iterator(im)]
    stack = np.stack(frames)
    temporal.write_stack(out_path, stack)
    print(f"wrote {out_path} (T={stack.shape[0]} H={stack.shape[1]} W={stack.shape[2]})")


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flucsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value (repeatable)")

    sp = sub.add_parser("simulate", help="simulate a blinking stack and its ground truth")
    with_config(sp)
    sp.add_argument("--stack", required=True)
    sp.add_argument("--truth", required=True)

    sp = sub.add_parser("stats", help="temporal mean and covariance of a stack")
    sp.add_argument("stack")
    sp.add_argument("--mean", required=True)
    sp.add_argument("--cov", required=True)

    sp = sub.add_parser("solve", help="Sliding Frank-Wolfe reconstruction")
    with_config(sp)
    sp.add_argument("data", help="FLCOV1 covariance or FLSTK1 stack/mean")
    sp.add_argument("--out", required=True, help="reconstruction CSV")
    sp.add_argument("--log", required=True, help="per-iteration log")

    sp = sub.add_parser("evaluate", help="Jaccard / RMSE against ground truth")
    sp.add_argument("truth")
    sp.add_argument("recon")
    sp.add_argument("--radius", type=float, help="matching radius in pixels")
    sp.add_argument("--config", help="take the radius default (0.5 sigma) from this config")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--out", help="key=value report path")

    sp = sub.add_parser("render", help="rasterize a spike list to a 16-bit PGM")
    sp.add_argument("spikes")
    with_config(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("pipeline", help="simulate, stats, solve, evaluate and render")
    with_config(sp)
    sp.add_argument("--outdir", required=True)

    sp = sub.add_parser("convert", help="multi-page TIFF to FLSTK1")
    sp.add_argument("tiff")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "stats":
            cmd_stats(args.stack, args.mean, args.cov)
        elif args.command == "evaluate":
            if args.radius is not None:
                if not args.radius > 0:
                    raise ConfigError("--radius", "must be positive")
                radius = args.radius
            elif args.config is not None:
                radius = default_radius(RunConfig(load_config(args.config, args.set)))
            else:
                raise ConfigError("--radius", "give --radius or --config")
            cmd_evaluate(args.truth, args.recon, radius, args.out)
        elif args.command == "convert":
            cmd_convert_tiff(args.tiff, args.out)
        else:
            cfg = RunConfig(load_config(args.config, args.set))
            if args.command == "simulate":
                cmd_simulate(cfg, args.stack, args.truth)
            elif args.command == "solve":
                cmd_solve(cfg, args.data, args.out, args.log)
            elif args.command == "render":
                cmd_render(cfg, args.spikes, args.out)
            elif args.command == "pipeline":
                cmd_pipeline(cfg, args.outdir)
    except ConfigError as exc:
        print(f"flucsr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StackFormatError, SpikeFileError, OSError) as exc:
        print(f"flucsr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"flucsr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
