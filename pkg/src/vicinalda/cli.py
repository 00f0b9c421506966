"""Command-line entry point.

Verbs: train, eval, sweep, equilibrium, selftest. Every verb prints the
fully resolved config first, so any run is reproducible from its own
output. All artifacts land under --out (or the config's out_dir).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import diffcore as dc
from .diffcore import SGD, ContractError, Tensor, backward
from .contrastive import confidence_mask
from .domains import DomainBatch, DomainBatcher, make_two_moons_pair
from .diagnostics import empirical_emp, equilibrium_report, lambda_sweep, write_sweep_csv
from .model import emp_forward, encode, init_model, load_checkpoint, logits_of
from .trainer import (
    TrainConfig,
    build_config,
    config_echo,
    derive_seeds,
    evaluate,
    make_dataset,
    train,
    warmup,
)
from .vicinal import (
    RatioVector,
    brute_force_emp,
    emp_argmax,
    emp_learner_loss,
    grid_entropy_table,
    mix,
    ratios,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vicinalda",
        description="Minimax mixup-ratio domain adaptation on synthetic domain pairs.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in (
        ("train", "run warmup plus adaptation epochs, writing metrics and checkpoints"),
        ("eval", "load the final checkpoint under --out and print accuracies"),
        ("sweep", "sweep the ratio grid with the final checkpoint, writing sweep.csv"),
        ("equilibrium", "compare warmup and final checkpoints, writing the report"),
        ("selftest", "run the oracle suite; nonzero exit on any failure"),
    ):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", metavar="PATH", default=None, help="key = value config file")
        p.add_argument(
            "--set",
            dest="sets",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", metavar="DIR", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed")
    return parser


def _resolve_config(args) -> TrainConfig:
    if args.config is not None and not os.path.exists(args.config):
        raise ContractError(f"config file not found: {args.config}")
    cfg = build_config(args.config, args.sets, args.out, args.seed)
    print("# effective config")
    print(config_echo(cfg))
    return cfg


def _checkpoint_path(cfg: TrainConfig, name: str) -> str:
    path = os.path.join(cfg.out_dir, name)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"expected checkpoint {path}; run `vicinalda train --out {cfg.out_dir}` first"
        )
    return path


def _cmd_train(cfg: TrainConfig) -> int:
    p, metrics_path = train(cfg)
    ds = make_dataset(cfg, derive_seeds(cfg.seed).data)
    src_acc, tgt_acc = evaluate(p, ds)
    print(f"metrics: {metrics_path}")
    print(f"final source_acc={src_acc:.4f} target_acc={tgt_acc:.4f}")
    return 0


def _cmd_eval(cfg: TrainConfig) -> int:
    p = load_checkpoint(_checkpoint_path(cfg, "checkpoint_final.ckpt"))
    ds = make_dataset(cfg, derive_seeds(cfg.seed).data)
    src_acc, tgt_acc = evaluate(p, ds)
    print(f"source_acc={src_acc:.4f} target_acc={tgt_acc:.4f}")
    return 0


def _cmd_sweep(cfg: TrainConfig) -> int:
    p = load_checkpoint(_checkpoint_path(cfg, "checkpoint_final.ckpt"))
    ds = make_dataset(cfg, derive_seeds(cfg.seed).data)
    rows = lambda_sweep(p, ds, n_samples=min(256, ds.n_source))
    path = os.path.join(cfg.out_dir, "sweep.csv")
    write_sweep_csv(rows, path)
    lam_max, lam_flip = empirical_emp(rows)
    flip_text = "absent" if lam_flip is None else f"{lam_flip:.1f}"
    print(f"sweep: {path}")
    print(f"entropy_peak_lambda={lam_max:.1f} dominance_flip_lambda={flip_text}")
    return 0


def _cmd_equilibrium(cfg: TrainConfig) -> int:
    before = load_checkpoint(_checkpoint_path(cfg, "checkpoint_warmup.ckpt"))
    after = load_checkpoint(_checkpoint_path(cfg, "checkpoint_final.ckpt"))
    ds = make_dataset(cfg, derive_seeds(cfg.seed).data)
    report = equilibrium_report(before, after, ds, cfg.out_dir, n_samples=min(256, ds.n_source))
    print(f"report: {report.summary_path}")
    print(open(report.summary_path).read().rstrip())
    return 0


# ---------------------------------------------------------------------------
# selftest: the oracle suite


def _fd_grads(fn, params, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def _grads_match(fn, params, rtol=1e-4) -> bool:
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    for a, n in zip(analytic, _fd_grads(fn, params)):
        norm = np.linalg.norm(n)
        if norm < 1e-8:
            if np.linalg.norm(a - n) >= 1e-8:
                return False
        elif np.linalg.norm(a - n) / norm >= rtol:
            return False
    return True


def _check_gradients(rng) -> bool:
    for trial in range(10):
        p = init_model(d=3, n_classes=3, feat_dim=4, hidden=5, hidden_g=6, seed=trial)
        x = Tensor(rng.normal(size=(4, 3)))
        xt = Tensor(rng.normal(size=(4, 3)))
        t = np.zeros((4, 3))
        t[np.arange(4), rng.integers(0, 3, 4)] = 1.0
        lam_t = Tensor(rng.uniform(0.1, 0.9, 4), requires_grad=True)
        zs_const = encode(p, x).detach()
        zt_const = encode(p, xt).detach()
        params = [p.enc_w1, p.enc_b1, p.cls_w, p.emp_w2, lam_t]

        def fn():
            z = logits_of(p, mix(x, xt, RatioVector(lam=lam_t)))
            grid = dc.tmean(dc.softmax(emp_forward(p, zs_const, zt_const)))
            return dc.cross_entropy(z, t) + 0.5 * dc.entropy(z) + grid

        if not _grads_match(fn, params):
            return False
    return True


def _check_softmax_and_entropy(rng) -> bool:
    for _ in range(50):
        z = rng.uniform(-1e3, 1e3, size=(6, 5))
        p = dc.softmax_np(z)
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
            return False
        h = dc.entropy_rows_np(rng.normal(scale=5.0, size=(6, 4)))
        if np.any(h < -1e-12) or np.any(h > np.log(4) + 1e-12):
            return False
    return True


def _check_brute_force_maximality(rng) -> bool:
    p = init_model(d=2, n_classes=2, seed=1)
    m = 32
    ys = np.zeros((m, 2))
    ys[np.arange(m), rng.integers(0, 2, m)] = 1.0
    batch = DomainBatch(
        xs=Tensor(rng.normal(size=(m, 2))), ys=Tensor(ys), xt=Tensor(rng.normal(size=(m, 2)))
    )
    lam = brute_force_emp(p, batch)
    table = grid_entropy_table(p, batch)
    chosen = table[np.arange(m), (lam.values * 10).round().astype(int)]
    return bool(np.all(chosen[:, None] >= table - 1e-15))


def _check_mask_equivalence(rng) -> bool:
    for _ in range(200):
        m = int(rng.integers(2, 40))
        probs = rng.uniform(0, 1, m)
        alpha = float(rng.uniform(-1, 3))
        mean = probs.sum() / m
        std = np.sqrt(((probs - mean) ** 2).sum() / (m - 1))
        if not np.array_equal(confidence_mask(probs, alpha), probs >= mean - alpha * std):
            return False
    return True


def _check_mix_identities(rng) -> bool:
    xs = Tensor(rng.normal(size=(5, 3)))
    xt = Tensor(rng.normal(size=(5, 3)))
    if not np.array_equal(mix(xs, xt, ratios(np.zeros(5))).data, xs.data):
        return False
    if not np.array_equal(mix(xs, xt, ratios(np.ones(5))).data, xt.data):
        return False
    mid = mix(Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]]), ratios([0.5]))
    return bool(np.array_equal(mid.data, [[1.0, 1.0]]))


def _check_emp_agreement(seed: int) -> bool:
    """Compact run of the learned-vs-exhaustive ratio agreement protocol."""
    cfg = TrainConfig(seed=seed)
    seeds = derive_seeds(seed)
    ds = make_two_moons_pair(1000, 40.0, 0.05, seeds.data)
    p = init_model(d=2, n_classes=2, seed=seeds.model)
    warmup(p, ds, cfg, np.random.default_rng(seeds.warmup_batches))
    opt_phi = SGD(p.phi_params(), lr=0.05, momentum=0.9)
    batcher = DomainBatcher(ds, 64, np.random.default_rng(seeds.covi_batches))
    total = 2000
    for step in range(total):
        if step == int(total * 0.75):
            opt_phi.lr = 0.01
        backward(dc.neg(emp_learner_loss(p, batcher.next_batch())))
        opt_phi.step()
        for t in p.theta_params():
            t.zero_grad()
    held = DomainBatch(
        xs=Tensor(ds.source_x.data[:256]),
        ys=Tensor(ds.source_y.data[:256]),
        xt=Tensor(ds.target_x.data[:256]),
    )
    learned = emp_argmax(p, held).values
    oracle = brute_force_emp(p, held).values
    exact = float((np.abs(learned - oracle) < 1e-9).mean())
    within_one = float((np.abs(learned - oracle) < 0.1 + 1e-9).mean())
    print(f"  emp agreement: exact={exact:.3f} within_one={within_one:.3f}")
    return exact >= 0.7 and within_one >= 0.95


def _cmd_selftest(cfg: TrainConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    checks = [
        ("finite-difference gradients", lambda: _check_gradients(rng)),
        ("softmax and entropy bounds", lambda: _check_softmax_and_entropy(rng)),
        ("brute-force ratio maximality", lambda: _check_brute_force_maximality(rng)),
        ("confidence-mask equivalence", lambda: _check_mask_equivalence(rng)),
        ("mix endpoint identities", lambda: _check_mix_identities(rng)),
        ("learned-vs-exhaustive ratio agreement", lambda: _check_emp_agreement(cfg.seed)),
    ]
    failures = 0
    for name, check in checks:
        t0 = time.time()
        ok = check()
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name} ({time.time() - t0:.1f}s)")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
        command = {
            "train": _cmd_train,
            "eval": _cmd_eval,
            "sweep": _cmd_sweep,
            "equilibrium": _cmd_equilibrium,
            "selftest": _cmd_selftest,
        }[args.verb]
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return command(cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # runtime failures: missing files, divergence
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
