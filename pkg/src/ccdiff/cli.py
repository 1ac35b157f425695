"""Command-line interface.

Subcommands: schedule, contract, shortcut, simulate, ccdf, phantom, check-op.
Outputs are CSV (UTF-8, header row) or PGM images.  Exit codes: 0 ok,
1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, consistency, harness, imgio
from .errors import NumericFailure, ValidationError
from .rng import RngStream
from .samplers import CcdfConfig, DEFAULT_CORRECTOR_R, ccdf_sample
from .schedules import (SamplerKind, Schedule, make_ve_schedule,
                        make_vp_schedule, write_schedule_csv)
from .score import ConditionalScoreOracle, GaussianScoreOracle, ScoreOracle


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors to exit code 1
        raise ValidationError(message)


def _add_schedule_args(p):
    p.add_argument("--kind", default="ddpm", choices=["ddpm", "smld", "ddim"])
    p.add_argument("--n-steps", type=int, default=1000)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=378.0)


def build_schedule(args) -> tuple[Schedule, SamplerKind]:
    kind = SamplerKind.parse(args.kind)
    if kind is SamplerKind.SMLD:
        return make_ve_schedule(args.sigma_min, args.sigma_max, args.n_steps), kind
    return make_vp_schedule(args.beta_min, args.beta_max, args.n_steps, kind=kind), kind


def read_op_config(path) -> dict:
    """Parse a key=value operator config file ('#' starts a comment)."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _box_hole_mask(shape, box) -> np.ndarray:
    """Measured-pixel mask with a centered unmeasured box of the given size."""
    H, W = shape
    try:
        bh, bw = (int(v) for v in box.split(","))
    except ValueError:
        raise ValidationError(f"box must be 'H,W', got {box!r}") from None
    if bh > H or bw > W or bh < 1 or bw < 1:
        raise ValidationError(f"box {bh}x{bw} does not fit in image {H}x{W}")
    mask = np.ones((H, W), dtype=bool)
    r0, c0 = (H - bh) // 2, (W - bw) // 2
    mask[r0:r0 + bh, c0:c0 + bw] = False
    return mask


def build_op(op_name: str | None, cfg: dict, schedule: Schedule,
             kind: SamplerKind):
    """Construct a consistency operator from an op name plus config keys.

    Recognized keys: kind, measurement (PGM/raw path), factor, box,
    mask-path, acs-fraction, accel-factor, seed.  For the MRI operator
    'measurement' names the image whose masked unitary-DFT k-space
    constitutes y.  The op name may come from the flag or the config's
    'kind' key; when both are present they must agree.
    """
    cfg_kind = cfg.get("kind")
    if op_name is None:
        if cfg_kind is None:
            raise ValidationError("operator kind missing: pass --op or put "
                                  "kind=... in the config")
        op_name = cfg_kind
    elif cfg_kind is not None and cfg_kind != op_name:
        raise ValidationError(
            f"operator kind mismatch: --op {op_name} vs config kind={cfg_kind}")
    measurement = None
    if "measurement" in cfg:
        measurement = imgio.load_image(cfg["measurement"])

    if op_name == "identity":
        if measurement is None:
            raise ValidationError("identity op needs measurement=<path> in the config")
        return consistency.IdentityOp(measurement.shape, measurement)

    if op_name == "sr":
        if measurement is None:
            raise ValidationError("sr op needs measurement=<path> in the config")
        factor = int(cfg.get("factor", 4))
        return consistency.sr_projection(factor, measurement, schedule, kind)

    if op_name == "inpaint":
        if measurement is None:
            raise ValidationError("inpaint op needs measurement=<path> in the config")
        if "mask-path" in cfg:
            mask = imgio.read_mask(cfg["mask-path"])
        elif "box" in cfg:
            mask = _box_hole_mask(measurement.shape, cfg["box"])
        else:
            raise ValidationError("inpaint op needs mask-path= or box= in the config")
        return consistency.inpaint_projection(mask, measurement, schedule, kind)

    if op_name == "mri":
        if measurement is None:
            raise ValidationError("mri op needs measurement=<path> in the config")
        if "mask-path" in cfg:
            mask = imgio.read_mask(cfg["mask-path"])
        else:
            mask = consistency.gaussian1d_mask(
                measurement.shape,
                accel=float(cfg.get("accel-factor", 4.0)),
                acs_fraction=float(cfg.get("acs-fraction", 0.08)),
                seed=int(cfg.get("seed", 0)),
            )
        y = consistency.mri_measure(measurement, mask)
        return consistency.mri_projection(mask, y)

    raise ValidationError(f"unknown operator {op_name!r}")


def _parse_oracle(spec: str, ground_truth: np.ndarray) -> ScoreOracle:
    if spec == "conditional":
        return ConditionalScoreOracle(ground_truth)
    if spec.startswith("gaussian"):
        var = 0.25
        if ":" in spec:
            var = float(spec.split(":", 1)[1])
        return GaussianScoreOracle(mu=ground_truth, var=var)
    raise ValidationError(f"unknown oracle spec {spec!r}")


class _CountingOracle(ScoreOracle):
    """Delegating oracle that counts score evaluations."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def score(self, x, i, schedule):
        self.calls += 1
        return self.inner.score(x, i, schedule)

    def jacobian_diag(self, x, i, schedule):
        return self.inner.jacobian_diag(x, i, schedule)


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


# ----------------------------- subcommands ---------------------------------


def cmd_schedule(args) -> int:
    schedule, _ = build_schedule(args)
    fh, close = _open_out(args.out)
    try:
        write_schedule_csv(schedule, fh)
    finally:
        if close:
            fh.close()
    return 0


def cmd_contract(args) -> int:
    schedule, kind = build_schedule(args)
    n_prime = args.n_prime if args.n_prime else CcdfConfig(
        t0=args.t0, N=schedule.N, kind=kind).n_prime
    report = analysis.contraction_report(schedule, kind, n_prime,
                                         args.n, args.tau, args.eps0)
    fh, close = _open_out(args.out)
    try:
        for key, value in report.rows():
            fh.write(f"{key},{value}\n")
        if args.per_step:
            fh.write("step,lambda,C\n")
            c_steps = analysis.noise_constant_per_step(schedule, kind, n_prime, args.n)
            for j in range(n_prime):
                fh.write(f"{j + 1},{report.lambda_per_step[j]!r},{c_steps[j]!r}\n")
    finally:
        if close:
            fh.close()
    return 0


def cmd_shortcut(args) -> int:
    schedule, kind = build_schedule(args)
    result = analysis.minimal_shortcut(args.eps0, args.mu, schedule, kind,
                                       args.tau, args.n)
    print(f"feasible,{result.feasible}")
    print(f"n_prime,{result.n_prime if result.n_prime is not None else ''}")
    if result.reason:
        print(f"reason,{result.reason}")
    for key, value in sorted(result.checks.items()):
        print(f"check[{key}],{value!r}")
    return 0


def _simulate_ground_truth(args):
    if args.size:
        try:
            H, W = (int(v) for v in args.size.lower().split("x"))
        except ValueError:
            raise ValidationError(f"--size must be HxW, got {args.size!r}") from None
        return harness.make_phantom(args.gt, (H, W), seed=args.seed)
    n = args.n or 64
    return RngStream(args.seed, (0x6774,)).uniform(0.0, 1.0, (n,))


def _simulate_op(args, ground_truth, schedule, kind):
    if args.op_config:
        return build_op(args.op, read_op_config(args.op_config), schedule, kind)
    if args.op == "identity":
        return consistency.IdentityOp(ground_truth.shape, ground_truth)
    if args.op == "inpaint":
        gen = RngStream(args.seed, (0x6D6B,)).generator()
        mask = gen.uniform(size=ground_truth.shape) < args.keep_fraction
        if not mask.any():
            mask.flat[0] = True
        return consistency.inpaint_projection(mask, ground_truth, schedule, kind)
    if args.op == "sr":
        if ground_truth.ndim != 2:
            raise ValidationError("sr simulation needs --size HxW")
        blocky = consistency.SrOp(args.factor, ground_truth, schedule, kind).project(
            ground_truth)
        return consistency.sr_projection(args.factor, blocky, schedule, kind)
    if args.op == "mri":
        if ground_truth.ndim != 2:
            raise ValidationError("mri simulation needs --size HxW")
        mask = consistency.gaussian1d_mask(ground_truth.shape, args.accel_factor,
                                           args.acs_fraction, args.seed)
        y = consistency.mri_measure(ground_truth, mask)
        return consistency.mri_projection(mask, y)
    raise ValidationError(f"unknown operator {args.op!r}")


_GNUPLOT_TEMPLATE = """\
# gnuplot script for a ccdiff trajectory CSV
set datafile separator ","
set key autotitle columnhead
set logscale y
set xlabel "step index (reverse time)"
set ylabel "squared error"
set xrange [*:*] reverse
plot "{csv}" using 1:2 with lines lw 2, \\
     "{csv}" using 1:4 with lines dt 2, \\
     "{csv}" using 1:5 with lines dt 3
"""


def cmd_simulate(args) -> int:
    schedule, kind = build_schedule(args)
    gt = _simulate_ground_truth(args)
    op = _simulate_op(args, gt, schedule, kind)
    oracle = _parse_oracle(args.oracle, gt)
    if args.init.startswith("file:"):
        init = imgio.load_image(args.init.split(":", 1)[1])
    else:
        init = harness.resolve_init(args.init, gt, op, args.seed)
    t0_values = [float(v) for v in args.t0.split(",")]
    cfg = harness.ExperimentConfig(
        schedule=schedule, kind=kind, t0=t0_values[0], trials=args.trials,
        ground_truth=gt, init=init, op=op, oracle=oracle, seed=args.seed,
        corrector_r=args.corrector_r, shared_reverse_noise=args.shared_noise,
    )
    fh, close = _open_out(args.out)
    try:
        if len(t0_values) == 1:
            stats = harness.run_error_curve(cfg)
            harness.write_trajectory_csv(stats, fh)
        else:
            sweep = harness.run_t0_sweep(cfg, t0_values)
            harness.write_sweep_csv(sweep, fh)
            print(f"argmin_t0,{sweep.argmin_t0}", file=sys.stderr)
            if sweep.beats_full_path is not None:
                print(f"beats_full_path,{sweep.beats_full_path}", file=sys.stderr)
    finally:
        if close:
            fh.close()
    if args.gnuplot:
        Path(args.gnuplot).write_text(
            _GNUPLOT_TEMPLATE.format(csv=args.out or "trajectory.csv"))
    return 0


def cmd_ccdf(args) -> int:
    schedule, kind = build_schedule(args)
    op = build_op(args.op, read_op_config(args.op_config), schedule, kind)
    consistency.certify_nonexpansive(op, trials=16, rng=RngStream(args.seed, (1,)))
    if args.init == "vanilla":
        x0 = op.vanilla_init()
    elif args.init.startswith("file:"):
        x0 = imgio.load_image(args.init.split(":", 1)[1])
    else:
        raise ValidationError(f"--init must be vanilla or file:<path>, got {args.init!r}")
    anchor = getattr(op, "measurement", None)
    if anchor is None:
        anchor = op.vanilla_init()
    oracle = _CountingOracle(_parse_oracle(args.oracle, anchor))
    cfg = CcdfConfig(t0=args.t0, N=args.n_steps, kind=kind,
                     corrector_r=args.corrector_r)
    start = time.perf_counter()
    x = ccdf_sample(x0, op, cfg, schedule, oracle, RngStream(args.seed))
    elapsed = time.perf_counter() - start
    if args.out:
        imgio.save_image(args.out, x)
    print(f"n_prime,{cfg.n_prime}")
    print(f"reverse_steps,{cfg.n_prime}")
    print(f"score_evaluations,{oracle.calls}")
    print(f"seconds,{elapsed:.3f}")
    if isinstance(op, consistency.MriOp):
        print(f"consistency_residual,{op.residual(x)!r}")
    return 0


def cmd_phantom(args) -> int:
    try:
        H, W = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise ValidationError(f"--size must be HxW, got {args.size!r}") from None
    img = harness.make_phantom(args.phantom_kind, (H, W), seed=args.seed)
    imgio.write_pgm(args.out, img)
    return 0


def cmd_check_op(args) -> int:
    schedule, kind = build_schedule(args)
    op = build_op(args.op, read_op_config(args.op_config), schedule, kind)
    rng = RngStream(args.seed, (0x636B,))
    sigma = consistency.certify_nonexpansive(op, trials=args.trials, rng=rng)
    gen = rng.generator()
    idem = sym = 0.0
    for _ in range(8):
        x = gen.standard_normal(op.shape)
        y = gen.standard_normal(op.shape)
        ax = op.apply_linear(x)
        idem = max(idem, float(np.max(np.abs(op.apply_linear(ax) - ax))))
        sym = max(sym, abs(float(np.vdot(ax, y) - np.vdot(x, op.apply_linear(y)))))
    tau = analysis.tau_of(op)
    hut, hut_se = consistency.hutchinson_tau(op.apply_linear, op.shape,
                                             rng=rng.substream(1))
    print(f"operator,{op.description}")
    print(f"sigma_max,{sigma!r}")
    print(f"idempotence_residual,{idem!r}")
    print(f"symmetry_residual,{sym!r}")
    print(f"tau,{tau.value!r}")
    print(f"tau_exact,{tau.exact}")
    print(f"tau_hutchinson,{hut!r}")
    print(f"tau_hutchinson_stderr,{hut_se!r}")
    return 0


# ------------------------------- parser ------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccdiff",
                     description="Shortcut-initialized conditional diffusion "
                                 "sampling with contraction certificates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="dump a noise schedule as CSV")
    _add_schedule_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("contract", help="contraction report for a schedule")
    _add_schedule_args(p)
    p.add_argument("--t0", type=float, default=1.0)
    p.add_argument("--n-prime", type=int, default=None)
    p.add_argument("--n", type=int, default=64, help="data dimension")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--eps0", type=float, default=1.0)
    p.add_argument("--per-step", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_contract)

    p = sub.add_parser("shortcut", help="minimal shortcut step search")
    _add_schedule_args(p)
    p.add_argument("--eps0", type=float, required=True)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_shortcut)

    p = sub.add_parser("simulate", help="coupled-trajectory error curves / sweeps")
    _add_schedule_args(p)
    p.add_argument("--t0", default="0.2", help="single value or comma list")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--n", type=int, default=None, help="vector dimension")
    p.add_argument("--size", default=None, help="image HxW (enables 2D ops)")
    p.add_argument("--gt", default="ellipses", choices=["ellipses", "blocks"])
    p.add_argument("--op", default="identity",
                   choices=["identity", "inpaint", "sr", "mri"])
    p.add_argument("--op-config", default=None)
    p.add_argument("--keep-fraction", type=float, default=0.5)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--accel-factor", type=float, default=4.0)
    p.add_argument("--acs-fraction", type=float, default=0.08)
    p.add_argument("--oracle", default="conditional")
    p.add_argument("--init", default="vanilla")
    p.add_argument("--corrector-r", type=float, default=0.0)
    p.add_argument("--shared-noise", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--gnuplot", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ccdf", help="shortcut-sample one reconstruction")
    _add_schedule_args(p)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--op", default=None,
                   choices=["sr", "inpaint", "mri", "identity"])
    p.add_argument("--op-config", required=True)
    p.add_argument("--init", default="vanilla",
                   help="vanilla | file:<path>")
    p.add_argument("--oracle", default="gaussian:0.25")
    p.add_argument("--corrector-r", type=float, default=DEFAULT_CORRECTOR_R)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ccdf)

    p = sub.add_parser("phantom", help="write a synthetic phantom as PGM")
    p.add_argument("--phantom-kind", default="ellipses",
                   choices=["ellipses", "blocks"])
    p.add_argument("--size", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("check-op", help="non-expansiveness and trace checks")
    _add_schedule_args(p)
    p.add_argument("--op", default=None,
                   choices=["sr", "inpaint", "mri", "identity"])
    p.add_argument("--op-config", required=True)
    p.add_argument("--trials", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_op)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
