"""bodylift command line.

Exit codes: 0 success, 1 usage or input error, 2 numerical divergence.
Options may also come from a JSON file given with ``--config``; keys are
option names (``batch_size`` or ``batch-size``) and explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from bodylift.body_model import (
    PoseState,
    center_at_hips,
    load_model,
    make_toy_model,
    save_model,
    skin_vertices,
)
from bodylift.errors import BodyliftError, DivergedError
from bodylift.fitting import fit, load_problem, make_mirror_problem, report_to_dict, save_problem
from bodylift.mixer import MixerConfig, load_checkpoint
from bodylift.sampling import SamplerConfig, generate_dataset, read_dataset
from bodylift.trainer import TrainConfig, LossWeights, check_compatible, evaluate, predict, train

log = logging.getLogger("bodylift")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _model(args):
    if args.model is None:
        return make_toy_model()
    path = Path(args.model)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise BodyliftError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def format_obj(vertices, faces) -> str:
    """Wavefront OBJ text: one ``v x y z`` line per vertex, 1-based ``f`` lines."""
    lines = ["# bodylift mesh"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    return "\n".join(lines) + "\n"


def _read_state(path) -> PoseState:
    doc = _read_json(path)
    if "state" in doc:  # a fit report
        doc = doc["state"]
    try:
        return PoseState.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise BodyliftError(f"{path}: not a state file ({exc})") from exc


def _read_landmarks(path) -> np.ndarray:
    if str(path).endswith(".npy"):
        return np.load(path)
    doc = _read_json(path)
    return np.asarray(doc["landmarks"] if isinstance(doc, dict) else doc, dtype=np.float64)


# ----------------------------------------------------------------- commands

def cmd_make_model(args):
    model = make_toy_model(seed=args.seed)
    save_model(model, args.out)
    print(f"wrote toy model: {model.joint_count} joints, {model.vertex_count} vertices, "
          f"{len(model.faces)} faces, hash {model.content_hash[:12]}")


def cmd_generate(args):
    model = _model(args)
    config = SamplerConfig(
        seed=args.seed,
        translation_half_extent=tuple(args.half_extent),
        noise_sigma=args.noise,
        latent_std=args.latent_std,
    )
    ds = generate_dataset(model, config, args.count, args.out)
    print(f"generated {len(ds)} examples, S={model.landmark_count}, noise={config.noise_sigma}, "
          f"model {model.content_hash[:12]} -> {args.out}")


def _mixer_config(args, model):
    return MixerConfig(
        tokens=args.tokens if args.tokens is not None else model.landmark_count,
        channels=args.channels,
        layers=args.layers,
        token_hidden=args.token_hidden,
        channel_hidden=args.channel_hidden,
        shape_dim=model.shape_dim,
        pose_dim=model.pose_dim,
        layer_norm=not args.no_layer_norm,
        residual=not args.no_residual,
    )


def cmd_train(args):
    model = _model(args)
    ds = read_dataset(args.dataset)
    mc = _mixer_config(args, model)
    check_compatible(model, mc, ds)
    tc = TrainConfig(
        batch_size=args.batch_size,
        steps=args.steps,
        learning_rate=args.lr,
        eval_every=args.eval_every,
        seed=args.seed,
        warmup_steps=args.warmup_steps,
        lr_schedule=args.lr_schedule,
        weights=LossWeights(args.w_rot, args.w_trans, args.w_beta, args.w_theta, args.w_landmarks),
    )
    log_path = args.log or str(args.out) + ".csv"
    res = train(model, ds, mc, tc, checkpoint_path=args.out, log_path=log_path)
    ev = res.best_eval
    print(f"best checkpoint (step {res.best_step}) -> {args.out}; log -> {log_path}")
    print(f"held-out MPJPE {ev['mpjpe_mm']:.2f} mm, MPJPE-PA {ev['mpjpe_pa_mm']:.2f} mm")


def cmd_evaluate(args):
    model = _model(args)
    params, mc, header = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    check_compatible(model, mc, ds)
    if args.split == "holdout":
        ds = ds.split(args.holdout_fraction)[1]
    metrics = evaluate(model, params, mc, ds)
    if args.out:
        _write_json(args.out, metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_synth_problem(args):
    model = _model(args)
    problem = make_mirror_problem(
        model, args.seed, pixel_noise=args.noise, constraint_count=args.constraints,
        distance=args.distance, focal=args.focal,
    )
    save_problem(problem, args.out)
    print(f"wrote fit problem with {len(problem.constraints)} constraints -> {args.out}")


def cmd_fit(args):
    model = _model(args)
    problem = load_problem(args.problem)
    if args.iterations is not None:
        problem.iterations = args.iterations
    init = None
    if args.init_state:
        init = _read_state(args.init_state)
    elif args.init_truth:
        if problem.truth is None:
            raise UsageError("--init-truth needs a problem with a debug truth block")
        init = problem.truth
    state, report = fit(problem, model, init=init)
    _write_json(args.out, report_to_dict(report, state))
    fmt = lambda v: "absent" if v is None else f"{v:.4f}"
    print(f"total loss {report.total_loss:.6g}; reprojection {report.reprojection_loss:.6g}; "
          f"ordinal {fmt(report.ordinal_loss)}")
    print(f"depth order error before {fmt(report.depth_order_error_before)}, "
          f"after {fmt(report.depth_order_error_after)}")
    if report.mpjpe_to_truth_mm is not None:
        print(f"MPJPE to truth {report.mpjpe_to_truth_mm:.3f} mm")


def cmd_export_obj(args):
    model = _model(args)
    if args.rest:
        verts = model.rest_vertices
    elif args.state:
        verts = skin_vertices(model, _read_state(args.state))
    elif args.checkpoint and args.landmarks:
        params, mc, _ = load_checkpoint(args.checkpoint)
        lm = _read_landmarks(args.landmarks)
        if lm.shape != (model.landmark_count, 3):
            raise BodyliftError(f"expected ({model.landmark_count}, 3) landmarks, got {lm.shape}")
        state = predict(params, mc, center_at_hips(lm, model.layout)[None])[0]
        verts = skin_vertices(model, state)
    else:
        raise UsageError("give --rest, --state, or --checkpoint with --landmarks")
    Path(args.out).write_text(format_obj(verts, model.faces))
    print(f"wrote {len(verts)} vertices, {len(model.faces)} faces -> {args.out}")


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bodylift", description="Toy body model lifting, fitting and crop tools.")
    p.add_argument("--config", help="JSON file of option defaults (flags win)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON file of option defaults (flags win)")
        if model:
            sp.add_argument("--model", help="model file (default: built-in toy model)")

    sp = sub.add_parser("make-model", help="write the toy model file")
    common(sp, model=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_model)

    sp = sub.add_parser("generate", help="sample a synthetic training dataset")
    common(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=SamplerConfig.noise_sigma)
    sp.add_argument("--half-extent", type=float, nargs=3, default=list(SamplerConfig.translation_half_extent))
    sp.add_argument("--latent-std", type=float, default=SamplerConfig.latent_std)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train the lifter")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="CSV metrics log (default: <out>.csv)")
    mc, tc, lw = MixerConfig(), TrainConfig(), LossWeights()
    sp.add_argument("--tokens", type=int, default=None)
    sp.add_argument("--channels", type=int, default=mc.channels)
    sp.add_argument("--layers", type=int, default=mc.layers)
    sp.add_argument("--token-hidden", type=int, default=mc.token_hidden)
    sp.add_argument("--channel-hidden", type=int, default=mc.channel_hidden)
    sp.add_argument("--no-layer-norm", action="store_true")
    sp.add_argument("--no-residual", action="store_true")
    sp.add_argument("--batch-size", type=int, default=tc.batch_size)
    sp.add_argument("--steps", type=int, default=tc.steps)
    sp.add_argument("--lr", type=float, default=tc.learning_rate)
    sp.add_argument("--eval-every", type=int, default=tc.eval_every)
    sp.add_argument("--warmup-steps", type=int, default=tc.warmup_steps)
    sp.add_argument("--lr-schedule", choices=("constant", "cosine"), default=tc.lr_schedule)
    sp.add_argument("--seed", type=int, default=tc.seed)
    sp.add_argument("--w-rot", type=float, default=lw.rot)
    sp.add_argument("--w-trans", type=float, default=lw.trans)
    sp.add_argument("--w-beta", type=float, default=lw.beta)
    sp.add_argument("--w-theta", type=float, default=lw.theta)
    sp.add_argument("--w-landmarks", type=float, default=lw.landmarks)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=("holdout", "all"), default="holdout")
    sp.add_argument("--holdout-fraction", type=float, default=tc.holdout_fraction)
    sp.add_argument("--out", help="write metrics JSON here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth-problem", help="write a synthetic mirror-ambiguous fit problem")
    common(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=1.0, help="pixel noise std")
    sp.add_argument("--constraints", type=int, default=8)
    sp.add_argument("--distance", type=float, default=40.0)
    sp.add_argument("--focal", type=float, default=13333.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_problem)

    sp = sub.add_parser("fit", help="fit a state to 2D keypoints and ordinal constraints")
    common(sp)
    sp.add_argument("--problem", required=True)
    sp.add_argument("--out", required=True, help="fit report JSON")
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--init-state", help="state JSON to start from")
    sp.add_argument("--init-truth", action="store_true", help="start from the problem's debug truth")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("export-obj", help="write a posed mesh as OBJ")
    common(sp)
    sp.add_argument("--state", help="state JSON (or fit report)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--landmarks", help="(S, 3) landmarks as JSON or .npy, used with --checkpoint")
    sp.add_argument("--rest", action="store_true", help="export the unposed rest mesh")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_obj)
    return p


def _config_defaults(argv):
    """Pull --config out of argv and return its contents as option defaults."""
    for i, a in enumerate(argv):
        path = None
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
        if path is not None:
            doc = _read_json(path)
            if not isinstance(doc, dict):
                raise UsageError("config file must hold a JSON object")
            return {k.replace("-", "_"): v for k, v in doc.items()}
    return {}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
        if defaults:
            # apply to the chosen subcommand's parser so flags still win
            sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            for sp in sub.choices.values():
                known = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in defaults.items() if k in known})
                for a in sp._actions:
                    if a.dest in defaults:
                        a.required = False
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s",
        )
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bodylift: error: {exc}", file=sys.stderr)
        return 1
    except DivergedError as exc:
        print(f"bodylift: diverged: {exc}", file=sys.stderr)
        return 2
    except (BodyliftError, ValueError, OSError) as exc:
        print(f"bodylift: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
