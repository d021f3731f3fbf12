"""Command-line experiment runner.

Every subcommand writes its data files, a ``summary.txt`` and a
``run_manifest.json`` (command, seed, config, input hashes, output hashes)
into ``--out-dir``. Exit status: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .attacks import AttackConfig, AttackKind, GradMode, attack_batch, blackbox_eval, transfer_eval, whitebox_eval
from .data import load_mnist_dir, load_weights, mnist_paths, save_bundle, save_weights
from .errors import BundleError, ContractError, IdxFormatError, MetricUndefinedError, UnsupportedPolicyError
from .floats import approx_bf16_multiply, ax_fpm_multiply
from .gates import AdderKind, Wiring, gate_counts
from .metrics import noise_profile
from .nn import (
    MulBackend,
    PrecisionPolicy,
    SGDConfig,
    confidences,
    evaluate,
    forward,
    lenet5,
    lenet5_layers,
    train_sgd,
)
from .nn.model import cross_entropy

log = logging.getLogger("defapprox")

BACKENDS = [b.value for b in MulBackend]
MULTIPLIERS = {"axfpm": ax_fpm_multiply, "bf16approx": approx_bf16_multiply}


# ---------------------------------------------------------------------------
# output helpers


def fmt(v):
    """Round-trip text for a number; binary32 values keep every bit."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if obj is None or isinstance(obj, (str, int, bool)):
        return obj
    return str(obj)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects the outputs of one subcommand and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.lines = []

    def input(self, path):
        path = Path(path)
        self.inputs[str(path)] = _sha256(path)
        return path

    def write_json(self, name, obj):
        (self.out / name).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
        self.outputs.append(name)

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        (self.out / name).write_text(buf.getvalue())
        self.outputs.append(name)

    def say(self, line):
        self.lines.append(line)

    def finish(self):
        (self.out / "summary.txt").write_text("\n".join(self.lines) + "\n")
        self.outputs.append("summary.txt")
        skip = {"out_dir", "workers", "func", "verbose"}
        config = {k: v for k, v in sorted(vars(self.args).items()) if k not in skip}
        manifest = {
            "command": self.args.command,
            "seed": self.args.seed,
            "config": config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {name: _sha256(self.out / name) for name in sorted(set(self.outputs))},
        }
        (self.out / "run_manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        print("\n".join(self.lines))


# ---------------------------------------------------------------------------
# shared argument handling


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _attack_list(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    for n in names:
        if n not in ("fgsm", "pgd"):
            raise argparse.ArgumentTypeError(f"unknown attack {n!r}")
    return names


def _grad_mode(text):
    try:
        return GradMode.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grad mode must be exact, bpda, fd or fd:<h>, got {text!r}") from None


def _policy(backend, exact_layers):
    overrides = {i: MulBackend.EXACT for i in exact_layers or []}
    return PrecisionPolicy(MulBackend(backend), overrides)


def _model(run, args, backend=None, exact_layers=None):
    run.input(Path(str(args.weights) + ".json"))
    run.input(Path(str(args.weights) + ".bin"))
    backend = backend or args.backend
    layers = args.exact_layers if exact_layers is None else exact_layers
    return load_weights(args.weights, policy=_policy(backend, layers))


def _dataset(run, args, split):
    for p in mnist_paths(args.data_dir, split):
        run.input(p)
    return load_mnist_dir(args.data_dir, split)


def _take(ds, n, seed):
    """First ``n`` examples after a seeded shuffle (all of them if n is 0)."""
    order = np.random.default_rng(seed).permutation(len(ds))
    return order[: n or len(ds)]


def _attack_cfgs(args, names, eps, grad_mode):
    cfgs = []
    for name in names:
        cfgs.append(
            AttackConfig(
                kind=AttackKind(name),
                epsilon=eps,
                step_size=args.step_size,
                iterations=args.iters,
                random_start=not args.no_random_start,
                grad_mode=grad_mode,
                seed=args.seed,
            )
        )
    return cfgs


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(run, args):
    sizes = [(4, 4), (8, 8)] + ([(12, 12)] if args.full else [])
    results = verify_mod.run_all(args.seed, sizes, args.random_pairs)
    run.write_csv("verify.csv", ["check", "cases", "failures", "ok"], [(r.name, r.cases, r.failures, r.ok) for r in results])
    for r in results:
        run.say(f"{'ok  ' if r.ok else 'FAIL'} {r.name}: {r.cases} cases, {r.failures} failures")
    return 0 if all(r.ok for r in results) else 1


def cmd_gate_report(run, args):
    rows = []
    for spec in args.sizes.split(","):
        n, _, m = spec.partition("x")
        for kind in AdderKind:
            for wiring in Wiring:
                g = gate_counts(kind, int(n), int(m or n), wiring)
                rows.append((kind.value, wiring.value, g.n, g.m, g.cells, g.and_gates))
    run.write_csv("gate_counts.csv", ["adder", "wiring", "n", "m", "full_adders", "and_gates"], rows)
    for r in rows:
        run.say(f"{r[0]:5s} {r[1]:11s} {r[2]}x{r[3]}: {r[4]} full adders, {r[5]} AND gates")
    return 0


def cmd_noise_report(run, args):
    prof = noise_profile(MULTIPLIERS[args.multiplier], args.lo, args.hi, args.n, args.bins, args.seed)
    summary = prof.to_dict()
    hist = summary.pop("histogram")
    run.write_json("noise_profile.json", summary)
    run.write_csv("noise_histogram.csv", ["bin_lo", "bin_hi", "count"], hist)
    run.say(f"{args.multiplier} on [{args.lo}, {args.hi}), n={args.n}")
    run.say(f"magnitude increased in {prof.frac_magnitude_increase:.4f} of cases ({prof.ties} ties)")
    run.say(f"MRED {prof.mred:.4f}  NMED {prof.nmed:.4f}  mean error {prof.mean_error:.6g}")
    return 0


def cmd_train(run, args):
    train = _dataset(run, args, "train")
    test = _dataset(run, args, "test")
    cfg = SGDConfig(lr=args.lr, batch=args.batch, epochs=args.epochs, momentum=args.momentum, seed=args.seed)
    history = []
    model = train_sgd(lenet5(seed=args.seed), train.images, train.labels, cfg, callback=lambda e, l: history.append((e + 1, l)))
    save_weights(run.out / "weights", model, {"train": vars(cfg)})
    run.outputs += ["weights.json", "weights.bin"]
    run.write_csv("train_log.csv", ["epoch", "loss"], history)
    res = evaluate(model, test.images, test.labels, workers=args.workers)
    run.write_json("train.json", {"config": vars(cfg), "test_accuracy": res.accuracy, "final_loss": history[-1][1] if history else None})
    run.say(f"trained {cfg.epochs} epochs on {len(train)} images; test accuracy {res.accuracy:.4f}")
    return 0


def cmd_eval(run, args):
    model = _model(run, args)
    test = _dataset(run, args, "test")
    idx = _take(test, args.n, args.seed)
    res = evaluate(model, test.images[idx], test.labels[idx], workers=args.workers)
    run.write_json("eval.json", {"policy": model.policy.describe(), "n": len(idx), "accuracy": res.accuracy, "mean_confidence": res.mean_confidence})
    run.write_csv("per_class.csv", ["class", "count", "correct", "accuracy"], res.per_class)
    run.write_csv(
        "predictions.csv",
        ["index", "label", "prediction", "confidence"],
        [(int(i), int(test.labels[i]), int(p), c) for i, p, c in zip(idx, res.predictions, res.confidences)],
    )
    run.say(f"{args.backend}: accuracy {res.accuracy:.4f} on {len(idx)} test images")
    return 0


def cmd_attack(run, args):
    model = _model(run, args)
    test = _dataset(run, args, "test")
    idx = _take(test, args.n, args.seed)
    (cfg,) = _attack_cfgs(args, [args.attack], args.eps, args.grad_mode)
    advs = attack_batch(model, test.images[idx], test.labels[idx], cfg, idx, workers=args.workers)
    perturbed = np.stack([a.perturbed for a in advs])
    res = forward(model, perturbed, workers=args.workers)
    preds = np.argmax(res.logits, axis=1)
    save_bundle(
        run.out / "adversarial",
        {"original": test.images[idx], "perturbed": perturbed, "labels": test.labels[idx].astype(np.float32), "indices": idx.astype(np.float32)},
        {"attack": cfg.describe()},
    )
    run.outputs += ["adversarial.json", "adversarial.bin"]
    rows = [(int(i), a.true_label, int(p), a.l2, a.linf) for i, a, p in zip(idx, advs, preds)]
    run.write_csv("attack.csv", ["index", "label", "prediction", "l2", "linf"], rows)
    rate = float(np.mean(preds != test.labels[idx]))
    run.write_json("attack.json", {"config": cfg.describe(), "policy": model.policy.describe(), "n": len(idx), "misclassification_rate": rate})
    run.say(f"{cfg.label} eps={cfg.epsilon}: misclassification {rate:.4f} on {len(idx)} images")
    return 0


def _report_table(run, report, stem):
    header = ["attack", "epsilon", "n", "source_success", "success_rate_on_source", "target_transfer", "transfer_rate_on_target", "mean_l2", "mean_linf"]
    rows = [[r.to_dict()[h] for h in header] for r in report.rows]
    run.write_csv(f"{stem}.csv", header, rows)
    run.write_json(f"{stem}.json", report.to_dict())
    for r in report.rows:
        d = r.to_dict()
        run.say(
            f"{d['attack']:5s} eps={d['epsilon']}: source success {r.source_success}/{r.n}, "
            f"transfer {r.target_transfer}/{r.source_success}"
        )


def cmd_transfer(run, args):
    source = _model(run, args, args.source, args.source_exact_layers)
    target = _model(run, args, args.target, args.target_exact_layers)
    test = _dataset(run, args, "test")
    idx = _take(test, args.n, args.seed)
    cfgs = _attack_cfgs(args, args.attacks, args.eps, args.grad_mode)
    report = transfer_eval(source, target, cfgs, test.images[idx], test.labels[idx], workers=args.workers, indices=idx)
    _report_table(run, report, "transfer")
    return 0


def cmd_blackbox(run, args):
    victim = _model(run, args)
    train = _dataset(run, args, "train")
    test = _dataset(run, args, "test")
    q = _take(train, args.queries, args.seed)
    idx = _take(test, args.n, args.seed)
    cfgs = _attack_cfgs(args, args.attacks, args.eps, args.grad_mode)
    tcfg = SGDConfig(lr=args.lr, batch=args.batch, epochs=args.epochs, momentum=args.momentum, seed=args.seed)
    report, substitute = blackbox_eval(victim, lenet5_layers(), train.images[q], cfgs, test.images[idx], test.labels[idx], tcfg, workers=args.workers)
    save_weights(run.out / "substitute", substitute)
    run.outputs += ["substitute.json", "substitute.bin"]
    if report.extra.get("diverged"):
        run.write_json("blackbox.json", report.to_dict())
        run.say("substitute training diverged; no attacks run")
        return 0
    _report_table(run, report, "blackbox")
    run.say(f"substitute accuracy {report.extra['substitute_accuracy']:.4f} after {report.extra['queries']} queries")
    return 0


def cmd_whitebox(run, args):
    model = _model(run, args)
    test = _dataset(run, args, "test")
    idx = _take(test, args.n, args.seed)
    cfgs = _attack_cfgs(args, args.attacks, args.eps_list[0], args.grad_mode)
    rows = whitebox_eval(model, cfgs, args.eps_list, test.images[idx], test.labels[idx], workers=args.workers)
    header = ["attack", "epsilon", "n", "accuracy", "mean_l2_successful"]
    run.write_csv("whitebox.csv", header, [[r.to_dict()[h] for h in header] for r in rows])
    run.write_json("whitebox.json", {"policy": model.policy.describe(), "grad_mode": str(args.grad_mode), "rows": [r.to_dict() for r in rows]})
    for r in rows:
        run.say(f"{r.attack:5s} eps={r.epsilon}: accuracy {r.accuracy:.4f}")
    return 0


def _per_class(labels, per_class, seed):
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        picks.append(np.sort(rng.choice(members, size=min(per_class, len(members)), replace=False)))
    return np.concatenate(picks)


def cmd_confidence_cdf(run, args):
    exact = _model(run, args, "exact", [])
    approx = _model(run, args)
    test = _dataset(run, args, "test")
    idx = _per_class(test.labels, max(1, args.n // 10), args.seed)
    x, y = test.images[idx], test.labels[idx]
    ce = confidences(forward(exact, x, workers=args.workers).probs, y)
    ca = confidences(forward(approx, x, workers=args.workers).probs, y)
    grid = np.round(np.linspace(-1.0, 1.0, 201), 10)
    run.write_csv("confidence_cdf.csv", ["threshold", "cdf_exact", "cdf_approx"], [(t, float(np.mean(ce <= t)), float(np.mean(ca <= t))) for t in grid])
    run.write_csv("confidence_samples.csv", ["index", "label", "exact", "approx"], [(int(i), int(l), e, a) for i, l, e, a in zip(idx, y, ce, ca)])
    above = {"exact": float(np.mean(ce > 0.8)), "approx": float(np.mean(ca > 0.8))}
    run.write_json("confidence.json", {"n": len(idx), "policy": approx.policy.describe(), "fraction_above_0.8": above})
    run.say(f"C > 0.8: exact {above['exact']:.4f}, {args.backend} {above['approx']:.4f} over {len(idx)} images")
    return 0


def cmd_grad_dump(run, args):
    from .attacks import gradient_for

    test = _dataset(run, args, "test")
    x, y = test.images[args.index], int(test.labels[args.index])
    summary = {"index": args.index, "label": y, "grad_mode": str(args.grad_mode)}
    for name, model in (("exact", _model(run, args, "exact", [])), (args.backend, _model(run, args))):
        g = gradient_for(model, x, y, args.grad_mode)[0]
        run.write_csv(f"grad_{name}.csv", [f"c{j}" for j in range(g.shape[1])], g.tolist())
        run.write_csv(f"sign_{name}.csv", [f"c{j}" for j in range(g.shape[1])], np.sign(g).astype(int).tolist())
        summary[name] = {"zero_fraction": float(np.mean(g == 0)), "l2": float(np.sqrt((g**2).sum()))}
        run.say(f"{name}: {summary[name]['zero_fraction']:.4f} of input-gradient entries are zero")
    summary["loss"] = float(cross_entropy(forward(_model(run, args), x).logits, [y])[0])
    run.write_json("grad_dump.json", summary)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--out-dir", required=True)
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--data-dir", default="data/mnist")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--weights", required=True, help="bundle path without the .json/.bin suffix")
    model.add_argument("--backend", choices=BACKENDS, default="axfpm")
    model.add_argument("--exact-layers", type=_int_list, default=[], help="layer indices kept exact, e.g. 0,3")

    attack = argparse.ArgumentParser(add_help=False)
    attack.add_argument("--iters", type=int, default=40)
    attack.add_argument("--step-size", type=float, default=None)
    attack.add_argument("--no-random-start", action="store_true")

    sgd = argparse.ArgumentParser(add_help=False)
    d = SGDConfig()
    sgd.add_argument("--lr", type=float, default=d.lr)
    sgd.add_argument("--batch", type=int, default=d.batch)
    sgd.add_argument("--epochs", type=int, default=d.epochs)
    sgd.add_argument("--momentum", type=float, default=d.momentum)

    parser = argparse.ArgumentParser(prog="defapprox", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("verify", parents=[common], help="truth tables, exhaustive multiplier sweeps, codec round-trips")
    p.add_argument("--full", action="store_true", help="also sweep 12x12 exhaustively")
    p.add_argument("--random-pairs", type=int, default=100_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gate-report", parents=[common], help="full-adder and AND-gate counts")
    p.add_argument("--sizes", default="4x4,8x8,24x24")
    p.set_defaults(func=cmd_gate_report)

    p = sub.add_parser("noise-report", parents=[common], help="error statistics of an approximate multiplier")
    p.add_argument("--multiplier", choices=sorted(MULTIPLIERS), default="axfpm")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_noise_report)

    p = sub.add_parser("train", parents=[common, sgd], help="train LeNet-5 with SGD")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, model], help="test accuracy under a precision policy")
    p.add_argument("--n", type=int, default=0, help="number of test images (0 = all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", parents=[common, model, attack], help="craft adversarial examples")
    p.add_argument("--attack", choices=["fgsm", "pgd"], default="pgd")
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--grad-mode", type=_grad_mode, default=GradMode.parse("bpda"))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", parents=[common, attack], help="transferability between two policies")
    p.add_argument("--weights", required=True)
    p.add_argument("--source", choices=BACKENDS, default="exact")
    p.add_argument("--target", choices=BACKENDS, default="axfpm")
    p.add_argument("--source-exact-layers", type=_int_list, default=[])
    p.add_argument("--target-exact-layers", type=_int_list, default=[])
    p.add_argument("--attacks", type=_attack_list, default=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--n", type=int, default=200, help="test images considered before filtering")
    p.add_argument("--grad-mode", type=_grad_mode, default=GradMode.parse("exact"))
    p.set_defaults(func=cmd_transfer, backend=None, exact_layers=[])

    p = sub.add_parser("blackbox", parents=[common, model, attack, sgd], help="substitute-model attack")
    p.add_argument("--queries", type=int, default=0, help="victim queries from the training split (0 = all)")
    p.add_argument("--attacks", type=_attack_list, default=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_blackbox, grad_mode=GradMode.parse("exact"))

    p = sub.add_parser("whitebox", parents=[common, model, attack], help="accuracy under attack versus budget")
    p.add_argument("--attacks", type=_attack_list, default=["pgd"])
    p.add_argument("--eps-list", type=_float_list, default=[0.0, 0.1, 0.2, 0.3])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--grad-mode", type=_grad_mode, default=GradMode.parse("bpda"))
    p.set_defaults(func=cmd_whitebox)

    p = sub.add_parser("confidence-cdf", parents=[common, model], help="confidence distribution, exact versus approximate")
    p.add_argument("--n", type=int, default=1000, help="total images, drawn evenly per class")
    p.set_defaults(func=cmd_confidence_cdf)

    p = sub.add_parser("grad-dump", parents=[common, model], help="input gradient and sign grids for one image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--grad-mode", type=_grad_mode, default=GradMode.parse("fd"))
    p.set_defaults(func=cmd_grad_dump)
    return parser


_CATEGORIES = (
    ((IdxFormatError, BundleError, FileNotFoundError), "input"),
    ((UnsupportedPolicyError,), "policy"),
    ((ContractError, MetricUndefinedError), "contract"),
    ((OSError,), "io"),
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        run = Run(args)
        status = args.func(run, args)
        run.finish()
        return status
    except Exception as exc:
        for types, category in _CATEGORIES:
            if isinstance(exc, types):
                print(f"defapprox: {category} error: {exc}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
