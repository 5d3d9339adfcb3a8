"""Command-line entry point.

Every run writes into its own directory under --out: a resolved-config
echo, a run manifest (seed, config hash, artifact version, timestamp),
and the experiment's metrics CSV. Timestamps live only in the manifest
so repeated runs stay byte-comparable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import bench, config as cfg_mod, flow, g3t, nn, toyworld
from .config import ConfigValidationError, RunConfig
from .tensor import RngStream, Tensor

ARTIFACT_VERSION = "0.1.0"


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amlbench", description="Toy manipulation benchmark: flow-matching action heads and gated multi-view fusion")
    p.add_argument("--config", help="path to key=value config file")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config and AMLB_OUT)")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate and save an expert dataset")
    sub.add_parser("train", help="train a policy and save a checkpoint")
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    sub.add_parser("ablate", help="denoising-steps x chunk-size x head-kind grid")
    sub.add_parser("fusion-ablate", help="fusion strategy comparison")
    sub.add_parser("depth-probe", help="frozen-feature depth probes")
    eg = sub.add_parser("export-gates", help="export per-token gate values as CSV")
    eg.add_argument("--ckpt", required=True)
    eg.add_argument("--scenes", type=int, default=8)
    rp = sub.add_parser("report", help="aggregate metrics CSVs into summaries and SVG plots")
    rp.add_argument("--metrics-dir", required=True)
    sub.add_parser("selftest", help="run the quick invariant suite")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = cfg_mod.load_config(args.config, cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["seeds"] = (args.seed,)
    out = args.out or os.environ.get("AMLB_OUT")
    if out:
        overrides["out"] = out
    if args.quiet:
        overrides["quiet"] = True
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg_mod.validate_config(cfg)
    return cfg


def _run_dir(cfg: RunConfig, name: str) -> str:
    d = os.path.join(cfg.out, name)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "config.resolved"), "w") as f:
        f.write(cfg_mod.config_echo(cfg))
    with open(os.path.join(d, "manifest.json"), "w") as f:
        json.dump({
            "seed": cfg.seed,
            "seeds": list(cfg.seeds),
            "config_hash": cfg_mod.config_hash(cfg),
            "artifact_version": ARTIFACT_VERSION,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }, f, indent=2)
    return d


def _log(cfg):
    def fn(msg):
        if not cfg.quiet:
            print(msg, flush=True)
    return fn


def _stub_dataset(ckpt: bench.Checkpoint) -> toyworld.Dataset:
    occ = toyworld.OcclusionConfig(side=ckpt.hyper.get("occlude_side", "none"),
                                   noise_std=float(ckpt.hyper.get("occlude_noise_std", 1.0)))
    return toyworld.Dataset(h=int(ckpt.hyper["h"]), with_views=ckpt.hyper["observe"] == "views",
                            episodes=[], action_mean=ckpt.norm_mean.copy(),
                            action_std=ckpt.norm_std.copy(), occlusion=occ)


def cmd_gen_data(cfg: RunConfig) -> int:
    d = _run_dir(cfg, "dataset")
    ds = toyworld.generate_dataset(cfg.episodes, cfg.chunk_h, cfg.seed,
                                   occlusion=cfg.occlusion_config(),
                                   with_views=cfg.observe == "views",
                                   layout=toyworld.LayoutParams(spread=cfg.layout_spread),
                                   depth_noise_std=cfg.depth_noise_std,
                                   view_noise_std=cfg.view_noise_std,
                                   mono_noise_std=cfg.mono_noise_std)
    path = os.path.join(d, "dataset.toyw")
    toyworld.save_dataset(ds, path)
    _log(cfg)(f"wrote {path} ({len(ds.episodes)} episodes)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    d = _run_dir(cfg, f"train-{cfg.head}-h{cfg.chunk_h}-s{cfg.seed}")
    ds = toyworld.generate_dataset(cfg.episodes, cfg.chunk_h, cfg.seed,
                                   occlusion=cfg.occlusion_config(),
                                   with_views=cfg.observe == "views",
                                   layout=toyworld.LayoutParams(spread=cfg.layout_spread),
                                   depth_noise_std=cfg.depth_noise_std,
                                   view_noise_std=cfg.view_noise_std,
                                   mono_noise_std=cfg.mono_noise_std)
    log = _log(cfg)
    _, ckpt, losses = bench.train_policy(cfg, cfg.head, cfg.chunk_h, cfg.seed, ds,
                                         progress=lambda t, l: log(f"step {t}: loss {l:.5f}"))
    bench.save_checkpoint(ckpt, os.path.join(d, "checkpoint.amlb"))
    with open(os.path.join(d, "loss_curve.csv"), "w") as f:
        f.write("step,loss\n")
        for i, l in enumerate(losses):
            f.write(f"{i},{l:.10g}\n")
    log(f"checkpoint written to {d}")
    return 0


def cmd_eval(cfg: RunConfig, ckpt_path: str) -> int:
    d = _run_dir(cfg, f"eval-s{cfg.seed}")
    ckpt = bench.load_checkpoint(ckpt_path)
    bundle = bench.restore_bundle(cfg, ckpt, _stub_dataset(ckpt))
    rows = []
    perturbs = [toyworld.PerturbationSpec()]
    if cfg.perturb_kind != "none":
        perturbs.append(cfg.perturbation())
    for spec in perturbs:
        rate = bench.eval_policy(cfg, bundle, cfg.denoise_steps, cfg.seed, perturb=spec)
        rows.append(bench.MetricsRow(
            run_id=f"eval-{spec.kind}-m{spec.magnitude:g}-s{cfg.seed}", seed=cfg.seed,
            experiment="eval", head_kind=bundle.net.kind, fusion_strategy=bundle.strategy,
            denoise_steps=cfg.denoise_steps, chunk_h=bundle.net.h,
            perturbation_kind=spec.kind, perturbation_magnitude=spec.magnitude,
            success_rate=rate))
        _log(cfg)(f"{rows[-1].run_id}: success_rate={rate:.3f}")
    bench.write_metrics(rows, os.path.join(d, "eval_metrics.csv"))
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    d = _run_dir(cfg, "ablate")
    rows = bench.ablation_grid(cfg, log=_log(cfg))
    bench.write_metrics(rows, os.path.join(d, "ablation_grid_metrics.csv"))
    deltas = bench.grid_degradation(rows, steps_n=4, h_low=10, h_high=30)
    log = _log(cfg)
    for kind, per_seed in sorted(deltas.items()):
        mean = float(np.mean(list(per_seed.values())))
        log(f"degradation h=10 -> h=30 at 4 steps, {kind}: mean {mean:+.3f} ({per_seed})")
    return 0


def cmd_fusion_ablate(cfg: RunConfig) -> int:
    cfg = replace(cfg, observe="views")
    d = _run_dir(cfg, "fusion-ablate")
    rows = bench.fusion_ablation(cfg, log=_log(cfg))
    bench.write_metrics(rows, os.path.join(d, "fusion_ablation_metrics.csv"))
    return 0


def cmd_depth_probe(cfg: RunConfig) -> int:
    cfg = replace(cfg, observe="views")
    d = _run_dir(cfg, "depth-probe")
    rows = []
    for seed in cfg.seeds:
        rows.extend(bench.depth_probe(cfg, seed, log=_log(cfg)))
    bench.write_metrics(rows, os.path.join(d, "depth_probe_metrics.csv"))
    return 0


def cmd_export_gates(cfg: RunConfig, ckpt_path: str, scenes: int) -> int:
    d = _run_dir(cfg, "gates")
    ckpt = bench.load_checkpoint(ckpt_path)
    bundle = bench.restore_bundle(cfg, ckpt, _stub_dataset(ckpt))
    path = os.path.join(d, "gate_maps.csv")
    bench.export_gate_maps(cfg, bundle, scenes, cfg.seed, path)
    _log(cfg)(f"wrote {path}")
    return 0


def cmd_report(cfg: RunConfig, metrics_dir: str) -> int:
    bench.emit_report(metrics_dir)
    _log(cfg)(f"report written next to metrics in {metrics_dir}")
    return 0


def cmd_selftest(cfg: RunConfig) -> int:
    log = _log(cfg)
    failures = []

    def check(name, ok):
        log(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    rng = RngStream(0)
    lin = nn.Linear(2, 2, rng)
    lin.weight.data[...] = [[3.0, 0.0], [0.0, 5.0]]
    lin.bias.data[...] = 0.0
    check("linear identity input", np.allclose(lin(Tensor(np.eye(2))).data, [[3, 0], [0, 5]]))
    sm = nn.softmax(Tensor(rng.normal((4, 5))))
    check("softmax rows sum to 1", np.allclose(sm.data.sum(axis=1), 1.0, atol=1e-12))
    sg = nn.sigmoid(Tensor(rng.normal(100) * 30)).data
    check("sigmoid strictly in (0,1)", np.all((sg > 0) & (sg < 1)))
    clean = rng.normal((4, 3))
    noise = rng.normal((4, 3))
    s = flow.interpolate(clean, noise, 0.0)
    check("interpolate endpoint tau=0", np.allclose(s.noisy, noise))
    check("loss weight values", flow.loss_weight(0.0) == 1.0 and flow.loss_weight(0.5) == 4.0)
    check("velocity substitution", np.allclose(
        flow.derive_velocity(clean, flow.interpolate(clean, noise, 0.3)), clean - noise))

    class _Oracle:
        h, d = 4, 3

        def predict_clean(self, noisy, tau, ctx, q):
            return clean

    out = flow.sample_actions(_Oracle(), np.zeros(0), np.zeros(0), 4, rng.child(5))
    check("oracle sampler exact", np.max(np.abs(out - clean)) < 1e-9)

    stack = g3t.G3TStack(c_v=3, c_z=3, c=8, heads=2, n_mono=2, m_view=3, rng=rng.child(6), pos_emb=False)
    for p in stack.gate_mlp.parameters():
        p.data[...] = 0.0
    gate = stack.compute_gate(Tensor(rng.normal((3, 8))), Tensor(rng.normal((3, 8))))
    check("zero gate MLP gives 0.5", np.allclose(gate.data, 0.5))

    s1, s2 = toyworld.reset(42), toyworld.reset(42)
    check("reset determinism", s1 == s2)
    r = toyworld.render_views(s1, rng=RngStream(1, 2))
    r0 = toyworld.apply_perturbation(r, toyworld.PerturbationSpec("noise", 0.0), RngStream(3))
    check("zero-magnitude perturbation is identity", r0 is r)

    log(f"selftest: {'all passed' if not failures else f'{len(failures)} failures'}")
    return 0 if not failures else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = _resolve_config(args)
    except (ConfigValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "fusion-ablate":
            return cmd_fusion_ablate(cfg)
        if args.command == "depth-probe":
            return cmd_depth_probe(cfg)
        if args.command == "export-gates":
            return cmd_export_gates(cfg, args.ckpt, args.scenes)
        if args.command == "report":
            return cmd_report(cfg, args.metrics_dir)
        if args.command == "selftest":
            return cmd_selftest(cfg)
        print(f"error: unknown command {args.command}", file=sys.stderr)
        return 1
    except (ConfigValidationError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
