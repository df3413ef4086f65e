"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autograd as ag
from . import envsim as es
from . import harness as hz
from . import vkt as vk
from .autograd import Tensor
from .robot_model import ChainParseError, ChainStructureError, ChainValidationError

OP_TOL = 1e-4
FULL_MODEL_TOL = 1e-3


def _parse_args(argv):
    p = argparse.ArgumentParser(prog="vischain")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="record scripted demonstration episodes")
    g.add_argument("--robot", required=True, choices=es.ROBOT_VARIANTS)
    g.add_argument("--episodes", required=True, type=int)
    g.add_argument("--views", required=True, type=int)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-vkt", help="train the forecasting backbone")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset dir, comma-separated for several")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", required=True, type=int)
    t.add_argument("--augment", action="store_true")
    t.add_argument("--steps", type=int, default=6000)

    h = sub.add_parser("train-head", help="train a per-env action head, backbone frozen")
    h.add_argument("--backbone", required=True)
    h.add_argument("--env", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--seed", required=True, type=int)
    h.add_argument("--steps", type=int, default=2000)

    b = sub.add_parser("train-bct", help="train the behavioral-cloning baseline")
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--env", required=True, help="env id, comma-separated for several")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", required=True, type=int)
    b.add_argument("--steps", type=int, default=6000)

    e = sub.add_parser("eval", help="rollout evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--robot", required=True, choices=es.ROBOT_VARIANTS)
    e.add_argument("--episodes", required=True, type=int)
    e.add_argument("--seed", required=True, type=int)
    e.add_argument("--chained", action="store_true")

    o = sub.add_parser("overlay", help="render forecast overlay SVG for one episode")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--episode", required=True, help="path to an ep_*.bin inside a dataset")
    o.add_argument("--out", required=True)

    gc = sub.add_parser("grad-check", help="finite-difference gradient checks")
    gc.add_argument("--full", action="store_true",
                    help="also check the composed tiny model")

    r = sub.add_parser("report", help="aggregate metrics files into a table")
    r.add_argument("files", nargs="+")

    return p.parse_args(argv)


def _split(csv):
    return tuple(s for s in csv.split(",") if s)


def cmd_gen_data(args):
    episodes = es.generate_episodes(args.seed, args.robot, args.episodes, args.views)
    es.dataset_save(episodes, args.out)
    with open(os.path.join(args.out, "run.json"), "w", encoding="utf-8") as f:
        json.dump({"command": "gen-data", "robot": args.robot,
                   "episodes": args.episodes, "views": args.views,
                   "seed": args.seed}, f, indent=2, sort_keys=True)
    print(f"wrote {args.episodes} episodes to {args.out}")
    return 0


def cmd_train_vkt(args):
    config = vk.VKTConfig.load(args.config)
    recipe = hz.TrainRecipe(phase=hz.PHASE_VKT, steps=args.steps, seed=args.seed,
                            data_paths=_split(args.data), augment=args.augment)
    hz.train_vkt(recipe, config, args.out)
    print(f"backbone checkpoint in {args.out}")
    return 0


def cmd_train_head(args):
    recipe = hz.TrainRecipe(phase=hz.PHASE_HEAD, steps=args.steps, seed=args.seed,
                            data_paths=_split(args.data), env_ids=(args.env,))
    hz.train_head(recipe, args.backbone, args.out)
    print(f"head checkpoint in {args.out}")
    return 0


def cmd_train_bct(args):
    config = vk.VKTConfig.load(args.config)
    recipe = hz.TrainRecipe(phase=hz.PHASE_BCT, steps=args.steps, seed=args.seed,
                            data_paths=_split(args.data), env_ids=_split(args.env))
    hz.train_bct(recipe, config, args.out)
    print(f"bct checkpoint in {args.out}")
    return 0


def cmd_eval(args):
    model = vk.load_model(args.ckpt)
    if args.robot not in model.head_ids:
        raise ValueError(f"checkpoint has no action head for {args.robot!r} "
                         f"(available: {model.head_ids})")
    agent = "vkt"
    run_path = os.path.join(args.ckpt, "run.json")
    if os.path.exists(run_path):
        with open(run_path, encoding="utf-8") as f:
            phase = json.load(f).get("recipe", {}).get("phase")
        if phase == hz.PHASE_BCT:
            agent = "bct"
    rec = hz.evaluate(model, args.robot, args.episodes, args.seed,
                      agent=agent, chained=args.chained)
    tag = f"eval_{args.robot}_s{args.seed}" + ("_chained" if args.chained else "")
    out_dir = os.path.join(args.ckpt, tag)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump({"command": "eval", "ckpt": args.ckpt, "robot": args.robot,
                   "episodes": args.episodes, "seed": args.seed,
                   "chained": args.chained}, f, indent=2, sort_keys=True)
    hz.append_metrics(os.path.join(out_dir, "metrics.jsonl"), rec)
    print(rec.to_line())
    return 0


def cmd_overlay(args):
    model = vk.load_model(args.ckpt)
    dataset_dir = os.path.dirname(os.path.abspath(args.episode))
    fname = os.path.basename(args.episode)
    episodes = es.dataset_load(dataset_dir)
    with open(os.path.join(dataset_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    names = [m["file"] for m in manifest["episodes"]]
    if fname not in names:
        raise ValueError(f"{fname} is not listed in {dataset_dir}/manifest.json")
    hz.render_overlay(model, episodes[names.index(fname)], args.out)
    print(f"wrote {args.out}")
    return 0


def _op_closures(rng):
    """Scalar-loss closures exercising each differentiable op."""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    m1, m2 = t(2, 3, 4), t(4, 5)
    x = t(2, 6, 8)
    g_, be = t(8), t(8)
    w, bias = t(8, 5), t(5)
    k = Tensor(rng.normal(size=(3, 8, 5)), requires_grad=True)
    q_, k2, v2 = t(2, 4, 8), t(2, 6, 8), t(2, 6, 8)
    parts = [t(2, 3), t(2, 3)]
    tk = t(5, 4)

    cases = {
        "add": (lambda: ag.sum_(ag.add(a, b)), [a, b]),
        "sub": (lambda: ag.sum_(ag.sub(a, b)), [a, b]),
        "mul": (lambda: ag.sum_(ag.mul(a, b)), [a, b]),
        "scale": (lambda: ag.sum_(ag.scale(a, 1.7)), [a]),
        "matmul": (lambda: ag.sum_(ag.matmul(m1, m2)), [m1, m2]),
        "reshape": (lambda: ag.sum_(ag.mul(ag.reshape(a, (4, 3)),
                                           ag.reshape(b, (4, 3)))), [a, b]),
        "transpose": (lambda: ag.sum_(ag.mul(ag.transpose(a, (1, 0)),
                                             ag.transpose(b, (1, 0)))), [a, b]),
        "concat": (lambda: ag.sum_(ag.mul(ag.concat(parts, axis=1),
                                          ag.concat(parts[::-1], axis=1))), parts),
        "take": (lambda: ag.sum_(ag.mul(tk[np.array([0, 2, 2, 4])],
                                        tk[np.array([1, 1, 3, 0])])), [tk]),
        "mean": (lambda: ag.mean(ag.mul(a, a)), [a]),
        "softmax": (lambda: ag.sum_(ag.mul(ag.softmax(a), b)), [a, b]),
        "sigmoid": (lambda: ag.sum_(ag.mul(ag.sigmoid(a), b)), [a, b]),
        "gelu": (lambda: ag.sum_(ag.mul(ag.gelu(a), b)), [a, b]),
        "layer_norm": (lambda: ag.sum_(ag.mul(ag.layer_norm(x, g_, be), x)),
                       [x, g_, be]),
        "linear": (lambda: ag.sum_(ag.mul(ag.linear(x, w, bias),
                                          ag.linear(x, w, bias))), [x, w, bias]),
        "conv1d": (lambda: ag.sum_(ag.mul(ag.conv1d(x, k, bias),
                                          ag.conv1d(x, k, bias))), [x, k, bias]),
        "attention": (lambda: ag.sum_(ag.mul(ag.attention(q_, k2, v2, 2),
                                             ag.attention(q_, k2, v2, 2))),
                      [q_, k2, v2]),
        "mse": (lambda: ag.mse(a, np.ones((3, 4))), [a]),
    }
    return cases


def run_grad_checks(full=False, fd_step=1e-6):
    """Returns (report dict name -> max rel err, worst op err, worst model err)."""
    rng = ag.seed_rng(0, "cli-grad-check")
    report = {}
    for name, (closure, tensors) in _op_closures(rng).items():
        params = {f"{name}.{i}": t for i, t in enumerate(tensors)}
        errs = ag.grad_check(closure, params, fd_step=fd_step)
        report[name] = max(errs.values())
    worst_model = None
    if full:
        config = vk.VKTConfig(T=3, D=16, L=1, n_heads=2, N_points=4,
                              patch_size=8, image_size=16, vocab=3)
        model = vk.VKT(config, seed=0, dtype=np.float64)
        model.register_action_head("toy", 3)
        img_rng = ag.seed_rng(1, "cli-grad-check-data")
        images = img_rng.integers(0, 256, size=(2, 2, 16, 16, 3), dtype=np.uint8)
        ids = np.array([0, 2])
        gt = img_rng.uniform(0.0, 1.0, size=(2, 2, 3, 4, 2))
        acts = img_rng.normal(size=(2, 3, 3))

        def model_closure():
            out = model.forecast(ids, images)
            fore = vk.vkt_loss(out, gt, eps=0.05, max_iters=200)
            act = vk.action_loss(model.action_head(out.kinematics_embeddings, "toy"),
                                 acts)
            return ag.add(fore, act)

        errs = ag.grad_check(model_closure, model.params, fd_step=1e-5,
                             samples_per_param=2)
        report["full_model"] = worst_model = max(errs.values())
    return report, worst_model


def cmd_grad_check(args):
    report, _ = run_grad_checks(full=args.full)
    ok = True
    for name, err in sorted(report.items()):
        tol = FULL_MODEL_TOL if name == "full_model" else OP_TOL
        line_ok = err <= tol
        ok = ok and line_ok
        print(f"{'PASS' if line_ok else 'FAIL'} {name:<12} max rel err {err:.3e} "
              f"(tol {tol:g})")
    return 0 if ok else 1


def cmd_report(args):
    text, csv = hz.report(args.files)
    print(text)
    print()
    print(csv)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vkt": cmd_train_vkt,
    "train-head": cmd_train_head,
    "train-bct": cmd_train_bct,
    "eval": cmd_eval,
    "overlay": cmd_overlay,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}

_VALIDATION_ERRORS = (ValueError, KeyError, hz.RecipeError, hz.ReportError,
                      hz.PhaseIsolationError, es.WorldGenError, es.IKError,
                      ChainParseError, ChainStructureError, ChainValidationError)


def main(argv=None):
    args = _parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return _COMMANDS[args.command](args)
    except es.DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
