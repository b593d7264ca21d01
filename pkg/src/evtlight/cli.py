"""Command-line front end: ``evtlight <command> [options]``.

Every run logs its resolved configuration as one JSON line on stderr.
Failures print a single ``error stage=<command> message=...`` line and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from evtlight import __version__

log = logging.getLogger("evtlight")

_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(us|ms|s)?\s*$")
_UNIT_US = {None: 1.0, "us": 1.0, "ms": 1e3, "s": 1e6}


def parse_duration(text: str) -> float:
    """``'5s'``, ``'100ms'``, ``'250us'`` or a bare number of microseconds -> µs."""
    m = _DURATION_RE.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (use e.g. 5s, 100ms, 250us)")
    return float(m.group(1)) * _UNIT_US[m.group(2)]


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _window(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window {text!r} (use 3 or 3x3)") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise argparse.ArgumentTypeError(f"bad window {text!r}")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _resolve_seed(args) -> None:
    env = os.environ.get("EVTLIGHT_SEED")
    if env is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env)
        except ValueError:
            raise StageError("config", f"EVTLIGHT_SEED={env!r} is not an integer") from None


def _log_config(args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


# --- commands -------------------------------------------------------------------


def cmd_pattern_gen(args) -> int:
    from evtlight.pattern import (
        SignalSpec,
        assign_signals,
        check_dmd_budget,
        generate_psm,
        make_stripe_pattern,
        save_pattern,
        verify_psm,
    )

    if args.kind == "stripes":
        pattern = make_stripe_pattern(args.rows, args.cols, args.stripe_period, args.frequency,
                                      args.dutycycle)
    else:
        duty = args.dutycycles
        if len(duty) != args.k:
            raise StageError("pattern-gen", f"--dutycycles lists {len(duty)} values for k={args.k}")
        grid = generate_psm(args.rows, args.cols, args.k, args.window, args.hmin, args.seed)
        report = verify_psm(grid)
        if not report.ok:
            raise StageError("pattern-gen", "generated grid failed verification")
        alphabet = {s: SignalSpec(args.frequency, a) for s, a in enumerate(duty)}
        pattern = assign_signals(grid, alphabet, args.seed, args.dot_pitch, args.dot_size)
    save_pattern(pattern, args.output)
    budget = check_dmd_budget(pattern)
    print(json.dumps({"output": str(args.output), "rows": pattern.rows, "cols": pattern.cols,
                      "dmd_max_changes": budget.max_changes, "dmd_feasible": budget.feasible}))
    return 0


def cmd_verify(args) -> int:
    from evtlight.pattern import load_pattern, verify_psm

    pattern = load_pattern(args.pattern)
    report = verify_psm(pattern.grid, h_min=args.hmin)
    print(json.dumps({"unique": report.unique, "min_hamming": report.min_hamming,
                      "h_min": report.h_min, "n_violations": report.n_violations,
                      "violations": [list(map(list, v[:2])) + [v[2]]
                                     for v in report.violations[:20]]}))
    if not report.ok:
        raise StageError("verify", f"{report.n_violations} window pairs violate H_min={report.h_min}")
    return 0


def _sensor_params(args):
    from evtlight.simulator import SensorParams

    return SensorParams(
        latency_us=args.latency,
        jitter_us=args.jitter,
        refractory_us=args.refractory,
        burst_mean=args.burst_mean,
        burst_cap=args.burst_cap,
        burst_interval_us=args.burst_interval,
        bandwidth_eps=args.bandwidth,
        noise_rate=args.noise_rate,
    )


def cmd_simulate(args) -> int:
    from evtlight.events import write_events
    from evtlight.pattern import load_pattern
    from evtlight.simulator import load_scene, simulate, write_truth
    from evtlight.triangulation import load_calibration

    pattern = load_pattern(args.pattern)
    scene = load_scene(args.scene)
    rig = load_calibration(args.calib)
    result, traces, _ = simulate(pattern, scene, rig, args.duration, _sensor_params(args),
                                 args.seed, args.step, args.allow_fast_step, args.threads)
    n = write_events(result.stream, args.output)
    if args.truth:
        write_truth(traces, pattern, args.truth)
    print(json.dumps({"events": n, "generated": result.generated, "dropped": result.dropped,
                      "visible_dots": sum(t.visible for t in traces), "dots": len(traces)}))
    return 0


def _filter_params(args):
    from evtlight.burst_filter import FilterParams

    if args.tau is not None:
        return FilterParams(args.tau, args.thresh_up, args.thresh_down)
    return FilterParams.for_frequency(args.frequency, args.thresh_up, args.thresh_down)


def cmd_filter(args) -> int:
    from evtlight.burst_filter import alternation_violations, filter_stream
    from evtlight.events import read_events, write_events

    stream = read_events(args.events)
    out = filter_stream(stream, _filter_params(args), args.threads)
    n = write_events(out, args.output)
    print(json.dumps({"input": len(stream), "output": n,
                      "alternation_violations": alternation_violations(out)}))
    return 0


def _frequency_from(args) -> float:
    if getattr(args, "pattern", None):
        from evtlight.pattern import load_pattern
        from evtlight.pipeline import pattern_frequency

        return pattern_frequency(load_pattern(args.pattern))
    return args.frequency


def cmd_estimate(args) -> int:
    from evtlight.burst_filter import FilterParams
    from evtlight.estimator import build_dutycycle_image
    from evtlight.events import read_events

    stream = read_events(args.events)
    freq = _frequency_from(args)
    params = FilterParams(args.tau, args.thresh_up, args.thresh_down) if args.tau else None
    image = build_dutycycle_image(stream, args.radius, args.lam, freq, params,
                                  threads=args.threads)
    image.to_csv(args.output)
    if args.gnuplot:
        image.to_gnuplot(args.gnuplot, str(args.gnuplot) + ".gp")
    print(json.dumps({"present_pixels": int(image.present.sum()), "frequency_hz": freq}))
    return 0


def cmd_reconstruct(args) -> int:
    from evtlight.correspondence import write_correspondences
    from evtlight.events import read_events
    from evtlight.pattern import load_pattern
    from evtlight.pipeline import (
        reconstruct_dutycycle,
        reconstruct_phase,
        rows_csv,
    )
    from evtlight.triangulation import export_ply, load_calibration
    from evtlight._io import atomic_write_text

    stream = read_events(args.events)
    pattern = load_pattern(args.pattern)
    rig = load_calibration(args.calib)
    if args.method == "dutycycle":
        if pattern.kind != "psm":
            raise StageError("reconstruct", "duty-cycle method needs a PSM pattern")
        rec = reconstruct_dutycycle(stream, pattern, rig, args.radius, args.lam,
                                    max_hamming=args.max_hamming, max_gap=args.max_gap,
                                    threads=args.threads)
        export_ply(rec.cloud, args.output)
        if args.correspondences:
            write_correspondences(rec.correspondences, args.correspondences)
        if args.image:
            rec.image.to_csv(args.image)
        rows = rec.summary.as_rows() + rec.report.as_rows()
        n_points = len(rec.cloud)
    else:
        if pattern.kind != "stripes":
            raise StageError("reconstruct", "phase method needs a stripe pattern")
        rec = reconstruct_phase(stream, pattern, rig, args.unwrap_gain, args.signed)
        export_ply(rec.cloud, args.output)
        z = rec.cloud.points[:, 2]
        rows = [("n_points", len(z)), ("n_lines", len(rec.lines)),
                ("n_rejected_rows", len(rec.rejected_rows))]
        if len(z):
            rows += [("depth_min", float(z.min())), ("depth_max", float(z.max())),
                     ("depth_mean", float(z.mean())), ("depth_median", float(np.median(z))),
                     ("depth_std", float(z.std()))]
        n_points = len(z)
    if n_points == 0:
        raise StageError("reconstruct", "no points were reconstructed")
    if args.report:
        atomic_write_text(args.report, rows_csv(rows))
    print(json.dumps({"points": n_points, "output": str(args.output)}))
    return 0


def cmd_eval(args) -> int:
    from evtlight.correspondence import read_correspondences
    from evtlight.pattern import load_pattern
    from evtlight.pipeline import evaluate, write_rows_csv
    from evtlight.simulator import read_truth
    from evtlight.triangulation import build_cloud, load_calibration

    pattern = load_pattern(args.pattern)
    rig = load_calibration(args.calib)
    corrs = read_correspondences(args.correspondences)
    truth = read_truth(args.truth)
    cloud, _ = build_cloud(corrs, rig, args.max_gap)
    ev = evaluate(corrs, cloud, truth, pattern, args.expected_depths or ())
    rows = [(k, (";".join(f"{m:.4f}" for m in v) if isinstance(v, list) else v))
            for k, v in ev.as_rows()]
    if args.output:
        write_rows_csv(rows, args.output)
    print(json.dumps({k: v for k, v in ev.as_rows()}, default=float))
    return 0


def cmd_freq_sweep(args) -> int:
    from evtlight._io import atomic_write_text
    from evtlight.pipeline import SWEEP_GNUPLOT, frequency_sweep, sweep_csv

    results = frequency_sweep(args.frequencies, args.periods, _sensor_params(args), args.seed,
                              args.radius)
    atomic_write_text(args.output, sweep_csv(results))
    if args.gnuplot:
        atomic_write_text(args.gnuplot, SWEEP_GNUPLOT.format(data=Path(args.output).name))
    for r in results:
        print(json.dumps({"commanded_hz": r.commanded_hz, "mean_hz": round(r.mean, 4),
                          "std_hz": round(r.std, 4)}))
    return 0


def cmd_scene_gen(args) -> int:
    from evtlight.pattern import load_pattern
    from evtlight.pipeline import box_on_plane_scene
    from evtlight.simulator import default_rig, plane_scene, save_scene
    from evtlight.triangulation import load_calibration

    if args.preset == "plane":
        scene = plane_scene(args.plane_depth, args.background)
    else:
        if not (args.pattern and args.calib):
            raise StageError("scene-gen", "the box preset needs --pattern and --calib")
        scene = box_on_plane_scene(load_pattern(args.pattern), load_calibration(args.calib),
                                   args.plane_depth, args.box_depth,
                                   background_depth=args.background)
    save_scene(scene, args.output)
    print(json.dumps({"output": str(args.output), "primitives": len(scene.primitives)}))
    return 0


def cmd_calib_gen(args) -> int:
    from evtlight.simulator import default_rig
    from evtlight.triangulation import save_calibration

    save_calibration(default_rig(args.focal, args.baseline, args.working_depth), args.output)
    print(json.dumps({"output": str(args.output)}))
    return 0


# --- parser -----------------------------------------------------------------------


def _add_sensor(p) -> None:
    g = p.add_argument_group("sensor model")
    g.add_argument("--latency", type=float, default=100.0, help="mean latency, us")
    g.add_argument("--jitter", type=float, default=10.0, help="timestamp jitter sigma, us")
    g.add_argument("--refractory", type=float, default=10.0, help="refractory period, us")
    g.add_argument("--burst-mean", type=float, default=2.0)
    g.add_argument("--burst-cap", type=int, default=10)
    g.add_argument("--burst-interval", type=float, default=10.0,
                   help="mean extra gap between burst events, us")
    g.add_argument("--bandwidth", type=float, default=8e6, help="events per second")
    g.add_argument("--noise-rate", type=float, default=0.0, help="events per pixel per second")


def _add_filter(p) -> None:
    g = p.add_argument_group("burst filter")
    g.add_argument("--tau", type=float, default=None, help="time constant, us (default T/10)")
    g.add_argument("--thresh-up", type=float, default=0.5)
    g.add_argument("--thresh-down", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evtlight", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"evtlight {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pattern-gen", help="generate a coded pattern file")
    p.add_argument("--kind", choices=["psm", "stripes"], default="psm")
    p.add_argument("--rows", type=int, default=20)
    p.add_argument("--cols", type=int, default=30)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--window", type=_window, default=(3, 3))
    p.add_argument("--hmin", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frequency", type=float, default=20.0, help="Hz")
    p.add_argument("--dutycycles", type=_float_list, default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--dutycycle", type=float, default=0.5, help="stripe duty cycle")
    p.add_argument("--dot-pitch", type=int, default=8)
    p.add_argument("--dot-size", type=int, default=3)
    p.add_argument("--stripe-period", type=float, default=32.0, help="projector px")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pattern_gen)

    p = sub.add_parser("verify", help="exhaustively verify a pattern's windows")
    p.add_argument("--pattern", required=True)
    p.add_argument("--hmin", type=int, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("scene-gen", help="write a preset scene file")
    p.add_argument("--preset", choices=["plane", "box"], default="plane")
    p.add_argument("--plane-depth", type=float, default=1.0)
    p.add_argument("--box-depth", type=float, default=0.8)
    p.add_argument("--background", type=float, default=5.0)
    p.add_argument("--pattern")
    p.add_argument("--calib")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("calib-gen", help="write the default side-by-side rig calibration")
    p.add_argument("--focal", type=float, default=300.0)
    p.add_argument("--baseline", type=float, default=0.2)
    p.add_argument("--working-depth", type=float, default=1.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_calib_gen)

    p = sub.add_parser("simulate", help="simulate the event stream of a pattern on a scene")
    p.add_argument("--pattern", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--duration", type=parse_duration, default=parse_duration("1s"))
    p.add_argument("--step", type=parse_duration, default=700.0, help="DMD step")
    p.add_argument("--allow-fast-step", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--truth", help="ground-truth sidecar CSV")
    p.add_argument("-o", "--output", required=True)
    _add_sensor(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="burst-filter an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--frequency", type=float, default=20.0, help="stimulus Hz, sets tau")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    _add_filter(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("estimate", help="build the duty-cycle image")
    p.add_argument("--events", required=True)
    p.add_argument("--pattern", help="takes the frequency from the pattern")
    p.add_argument("--frequency", type=float, default=20.0)
    p.add_argument("--radius", type=int, default=1, help="neighbourhood N")
    p.add_argument("--lam", type=float, default=0.1, help="half-period smoothing")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--gnuplot", help="heatmap data file (script written next to it)")
    p.add_argument("-o", "--output", required=True)
    _add_filter(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("reconstruct", help="events to point cloud")
    p.add_argument("--method", choices=["dutycycle", "phase"], default="dutycycle")
    p.add_argument("--events", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--max-hamming", type=int, default=0)
    p.add_argument("--max-gap", type=float, default=0.01, help="metres")
    p.add_argument("--unwrap-gain", type=float, default=1.0)
    p.add_argument("--signed", action="store_true", help="signed modulus when unwrapping")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--correspondences", help="correspondence CSV")
    p.add_argument("--image", help="duty-cycle image CSV")
    p.add_argument("--report", help="depth/match report CSV")
    p.add_argument("-o", "--output", required=True, help="PLY")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score correspondences against a ground-truth sidecar")
    p.add_argument("--correspondences", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--max-gap", type=float, default=0.01)
    p.add_argument("--expected-depths", type=_float_list, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("freq-sweep", help="frequency-extraction table over a range of rates")
    p.add_argument("--frequencies", type=_float_list,
                   default=[40.0, 100.0, 200.0, 500.0, 666.0, 1000.0])
    p.add_argument("--periods", type=int, default=100)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gnuplot", help="gnuplot script path")
    p.add_argument("-o", "--output", required=True)
    _add_sensor(p)
    p.set_defaults(func=cmd_freq_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve_seed(args)
        _log_config(args)
        return args.func(args)
    except StageError as exc:
        print(f"error stage={exc.stage} message={_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error stage={args.command} message={_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def run(argv: list[str] | None = None) -> int:
    """Like :func:`main` but maps argparse exits to return codes."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
