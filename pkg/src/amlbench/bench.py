"""Training loops, evaluation harness, and the three headline experiments:
the parameterization ablation grid, the fusion-strategy ablation, and the
frozen-feature depth probe, plus gate-map export and report emission."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow, g3t, nn, toyworld
from .tensor import NumericError, RngStream, Tensor, no_grad

CKPT_MAGIC = b"AMLB"
CKPT_VERSION = 1

METRICS_COLUMNS = [
    "run_id", "seed", "experiment", "head_kind", "fusion_strategy",
    "denoise_steps", "chunk_h", "perturbation_kind", "perturbation_magnitude",
    "success_rate", "final_loss", "probe_rmse", "probe_absrel",
    "gate_mean_clean", "gate_mean_corrupted",
]


class CheckpointVersionError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    hyper: dict
    params: dict  # name -> np.ndarray, insertion-ordered
    norm_mean: np.ndarray
    norm_std: np.ndarray
    step: int
    version: int = CKPT_VERSION


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        hyper_text = "\n".join(f"{k}={ckpt.hyper[k]}" for k in sorted(ckpt.hyper)).encode()
        f.write(struct.pack("<I", len(hyper_text)))
        f.write(hyper_text)
        f.write(struct.pack("<Q", ckpt.step))
        for arr in (ckpt.norm_mean, ckpt.norm_std):
            a = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", a.size))
            f.write(a.tobytes())
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            a = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", a.ndim))
            for s in a.shape:
                f.write(struct.pack("<I", s))
            f.write(a.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointVersionError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
        (hlen,) = struct.unpack("<I", f.read(4))
        hyper_text = f.read(hlen).decode()
        hyper = dict(line.split("=", 1) for line in hyper_text.splitlines() if line)
        (step,) = struct.unpack("<Q", f.read(8))
        stats = []
        for _ in range(2):
            (n,) = struct.unpack("<I", f.read(4))
            stats.append(np.frombuffer(f.read(8 * n), dtype="<f8").copy())
        (n_params,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            cnt = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(f.read(8 * cnt), dtype="<f8").reshape(shape).copy()
    return Checkpoint(hyper=hyper, params=params, norm_mean=stats[0], norm_std=stats[1], step=step, version=version)


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    experiment: str
    head_kind: str = ""
    fusion_strategy: str = ""
    denoise_steps: int = 0
    chunk_h: int = 0
    perturbation_kind: str = "none"
    perturbation_magnitude: float = 0.0
    success_rate: float = float("nan")
    final_loss: float = float("nan")
    probe_rmse: float = float("nan")
    probe_absrel: float = float("nan")
    gate_mean_clean: float = float("nan")
    gate_mean_corrupted: float = float("nan")

    def values(self):
        return [getattr(self, c) for c in METRICS_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.10g}"
    return str(v)


def write_metrics(rows: list[MetricsRow], path):
    with open(path, "w", newline="") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row.values()) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        out = []
        for line in f:
            vals = line.strip().split(",")
            out.append(dict(zip(header, vals)))
    return out


# -- model assembly ------------------------------------------------------


@dataclass
class ModelBundle:
    net: flow.PolicyNetwork
    stack: g3t.G3TStack | None
    strategy: str
    observe: str  # state | views
    dataset: toyworld.Dataset

    def context_dim(self) -> int:
        return self.net.ctx_dim


PROPRIO_DIMS = 4  # gripper x/y, closed, held

# inverse temperature for the spatial soft-argmax: fused channel activations
# vary by ~0.1 across tokens at init, so unscaled softmax weights are nearly
# uniform and the resulting coordinates barely move between scenes; sharpening
# puts the context on the same scale as the scene coordinates it encodes
CTX_BETA = 20.0


def _strategy_ctx_dim(stack_c: int) -> int:
    # spatial soft-argmax summarizes each fused channel as an (x, y) pair
    return 2 * stack_c


def build_models(cfg, kind: str, h: int, seed: int, dataset: toyworld.Dataset) -> ModelBundle:
    rng = RngStream(seed, 7)
    observe = cfg.observe
    if observe == "views":
        stack = g3t.G3TStack(
            c_v=toyworld.C_MONO, c_z=toyworld.C_VIEW, c=cfg.fusion_c, heads=cfg.heads,
            n_mono=toyworld.N_TOKENS, m_view=toyworld.N_TOKENS, rng=rng.child(8),
            pos_emb=cfg.pos_emb,
        )
        ctx_dim = _strategy_ctx_dim(cfg.fusion_c)
        q_dim = PROPRIO_DIMS
    else:
        stack = None
        ctx_dim = 0
        q_dim = toyworld.Q_DIM
    net = flow.PolicyNetwork(
        h=h, d=toyworld.ACTION_DIM, ctx_dim=ctx_dim, q_dim=q_dim, kind=kind,
        width=cfg.width, blocks=cfg.blocks, time_dim=cfg.time_dim, rng=rng.child(9),
    )
    return ModelBundle(net=net, stack=stack, strategy=cfg.strategy, observe=observe, dataset=dataset)


def _scene_context(bundle: ModelBundle, mono, left, right) -> Tensor:
    """Per-channel spatial soft-argmax over the fused token lattice.

    Each channel contributes the softmax-weighted mean of its tokens'
    lattice coordinates, so scene positions (objects, goal) are linearly
    available to the policy while staying differentiable through the
    fusion stack — corrupted tokens that win the softmax directly corrupt
    the position estimates, which is what pressures the gate."""
    fused = bundle.stack.forward(bundle.strategy, mono, left, right)  # (T, C)
    n_tok = fused.shape[0]
    reps = n_tok // toyworld.N_TOKENS
    centers = np.concatenate([toyworld._CENTERS] * reps, axis=0)  # (T, 2)
    weights = nn.softmax(Tensor.as_tensor(CTX_BETA) * fused.T)  # (C, T), one distribution per channel
    coords = weights @ Tensor.as_tensor(centers)  # (C, 2)
    return coords.reshape(1, 2 * bundle.stack.c)


def cosine_lr(step: int, total: int, base: float, warmup: int, floor_frac: float = 0.05) -> float:
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base * (floor_frac + (1 - floor_frac) * 0.5 * (1 + np.cos(np.pi * progress)))


def train_policy(cfg, kind: str, h: int, seed: int, dataset: toyworld.Dataset,
                 progress=None) -> tuple[ModelBundle, Checkpoint, list[float]]:
    bundle = build_models(cfg, kind, h, seed, dataset)
    qs, chunks, ep_idx, step_idx = dataset.windows()
    chunks_norm = dataset.normalize(chunks)
    n_windows = qs.shape[0]
    q_obs = qs[:, :PROPRIO_DIMS] if bundle.observe == "views" else qs

    params = bundle.net.parameters() + (bundle.stack.parameters() if bundle.stack else [])
    # assign stable parameter names for optimizer diagnostics / checkpoints
    list(bundle.net.named_parameters("net."))
    if bundle.stack:
        list(bundle.stack.named_parameters("stack."))
    # the gate MLP gets its own, much stronger decay: its neutral point
    # (zero logits -> gate 0.5) is recovered wherever the task gradient goes
    # quiet, which stops the shared bias from collapsing the whole gate to
    # one side when only the corrupted tokens carry suppression pressure
    gate_params = set(id(p) for p in bundle.stack.gate_mlp.parameters()) if bundle.stack else set()
    main = [p for p in params if id(p) not in gate_params]
    opt = nn.AdamW(main, lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_gate = (nn.AdamW(bundle.stack.gate_mlp.parameters(), lr=cfg.lr,
                         weight_decay=cfg.gate_weight_decay) if bundle.stack else None)
    batch_rng = RngStream(seed, 11)
    loss_rng = RngStream(seed, 12)
    aug_rng = RngStream(seed, 13)
    occ = dataset.occlusion
    occ_mask = occ.corrupted_mask()
    def _window_views(i):
        ep = dataset.episodes[ep_idx[i]]
        s = step_idx[i]
        left, right = ep.left[s], ep.right[s]
        # resample occluded-token noise each visit so the corrupted
        # side cannot be memorized and stays genuinely uninformative
        if occ.side == "left":
            left = left.copy()
            left[occ_mask] = occ.noise_std * aug_rng.normal((int(occ_mask.sum()), left.shape[1]))
        elif occ.side == "right":
            right = right.copy()
            right[occ_mask] = occ.noise_std * aug_rng.normal((int(occ_mask.sum()), right.shape[1]))
        return ep.mono[s], left, right

    # views training is two-phase: the fusion forward is ~50x the cost of the
    # policy trunk, so a full-batch joint loop is unaffordable and a small-batch
    # one never teaches the policy to read the context before the gate drifts.
    # Phase 1 trains the trunk at full batch on cached no-grad contexts from the
    # frozen stack (cache refreshed with fresh corruption noise); phase 2
    # fine-tunes jointly at small batch, which is when gate gradients flow.
    pre_steps = cfg.train_steps // 2 if bundle.observe == "views" else 0
    ctx_cache = None
    losses = []
    for t in range(cfg.train_steps):
        opt.lr = cosine_lr(t, cfg.train_steps, cfg.lr, cfg.warmup_steps)
        if opt_gate:
            opt_gate.lr = opt.lr
        if t < pre_steps:
            if t % 100 == 0:
                with no_grad():
                    ctx_cache = np.concatenate(
                        [_scene_context(bundle, *_window_views(i)).data for i in range(n_windows)])
            idx = batch_rng.integers(0, n_windows, size=cfg.batch)
            contexts = ctx_cache[idx]
        elif bundle.observe == "views":
            idx = batch_rng.integers(0, n_windows, size=cfg.batch_views)
            contexts = Tensor.concat([_scene_context(bundle, *_window_views(i)) for i in idx], axis=0)
        else:
            idx = batch_rng.integers(0, n_windows, size=cfg.batch)
            contexts = np.zeros((cfg.batch, 0))
        tb = flow.TrainBatch(contexts=contexts, states=q_obs[idx], actions=chunks_norm[idx])
        loss = flow.training_loss(bundle.net, tb, loss_rng, tau_max=cfg.tau_max)
        if not np.isfinite(loss.data):
            raise NumericError(f"NaN loss at step {t} (kind={kind}, h={h}, seed={seed})")
        opt.zero_grad()
        if opt_gate:
            opt_gate.zero_grad()
        loss.backward()
        _clip_grads(params, cfg.grad_clip)
        opt.step()
        if opt_gate:
            opt_gate.step()
        losses.append(loss.item())
        if progress and t % 500 == 0:
            progress(t, losses[-1])
    ckpt = make_checkpoint(cfg, bundle, kind, h, step=cfg.train_steps)
    return bundle, ckpt, losses


def _clip_grads(params, max_norm: float):
    if max_norm <= 0:
        return
    total = np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def make_checkpoint(cfg, bundle: ModelBundle, kind: str, h: int, step: int) -> Checkpoint:
    hyper = {
        "kind": kind, "h": str(h), "observe": bundle.observe, "strategy": bundle.strategy,
        "width": str(cfg.width), "blocks": str(cfg.blocks), "time_dim": str(cfg.time_dim),
        "fusion_c": str(cfg.fusion_c), "heads": str(cfg.heads), "pos_emb": str(int(cfg.pos_emb)),
        "occlude_side": bundle.dataset.occlusion.side,
        "occlude_noise_std": str(bundle.dataset.occlusion.noise_std),
        "depth_noise_std": str(cfg.depth_noise_std),
        "view_noise_std": str(cfg.view_noise_std),
        "mono_noise_std": str(cfg.mono_noise_std),
    }
    params = {name: p.data.copy() for name, p in bundle.net.named_parameters("net.")}
    if bundle.stack is not None:
        params.update({name: p.data.copy() for name, p in bundle.stack.named_parameters("stack.")})
    return Checkpoint(hyper=hyper, params=params,
                      norm_mean=bundle.dataset.action_mean.copy(),
                      norm_std=bundle.dataset.action_std.copy(), step=step)


def restore_bundle(cfg, ckpt: Checkpoint, dataset: toyworld.Dataset) -> ModelBundle:
    kind = ckpt.hyper["kind"]
    h = int(ckpt.hyper["h"])
    cfg2 = replace(cfg, observe=ckpt.hyper["observe"], strategy=ckpt.hyper["strategy"],
                   width=int(ckpt.hyper["width"]), blocks=int(ckpt.hyper["blocks"]),
                   time_dim=int(ckpt.hyper["time_dim"]), fusion_c=int(ckpt.hyper["fusion_c"]),
                   heads=int(ckpt.hyper["heads"]), pos_emb=bool(int(ckpt.hyper["pos_emb"])))
    bundle = build_models(cfg2, kind, h, seed=0, dataset=dataset)
    named = dict(bundle.net.named_parameters("net."))
    if bundle.stack is not None:
        named.update(dict(bundle.stack.named_parameters("stack.")))
    for name, arr in ckpt.params.items():
        named[name].data[...] = arr
    bundle.dataset.action_mean = ckpt.norm_mean.copy()
    bundle.dataset.action_std = ckpt.norm_std.copy()
    return bundle


# -- evaluation ----------------------------------------------------------


def _observe(bundle: ModelBundle, state, eval_seed: int, t: int, cfg,
             perturb: toyworld.PerturbationSpec):
    if bundle.observe == "views":
        render = toyworld.render_views(state, bundle.dataset.occlusion,
                                       RngStream(eval_seed, 3000 + t), cfg.depth_noise_std,
                                       cfg.view_noise_std, cfg.mono_noise_std)
        if perturb.kind not in ("none", "layout"):
            render = toyworld.apply_perturbation(render, perturb, RngStream(eval_seed, 4000 + t))
        with no_grad():
            ctx = _scene_context(bundle, render.mono, render.left, render.right).data[0]
        q = toyworld.state_vector(state)[:PROPRIO_DIMS]
    else:
        ctx = np.zeros(0)
        q = toyworld.state_vector(state)
    return ctx, q


def eval_policy(cfg, bundle: ModelBundle, denoise_steps: int, seed: int,
                perturb: toyworld.PerturbationSpec = toyworld.PerturbationSpec(),
                rollouts: int | None = None) -> float:
    """Seeded rollouts with open-loop chunk execution and re-planning."""
    rollouts = cfg.rollouts if rollouts is None else rollouts
    h = bundle.net.h
    layout = toyworld.LayoutParams(spread=cfg.layout_spread * (1.0 + (perturb.magnitude if perturb.kind == "layout" else 0.0)))
    successes = 0
    for r in range(rollouts):
        eval_seed = 5_000_000 + seed * 9973 + r
        state = toyworld.reset(eval_seed, layout)
        noise_rng = RngStream(eval_seed, 55)
        t = 0
        done = False
        while t < toyworld.MAX_EPISODE_STEPS and not done:
            ctx, q = _observe(bundle, state, eval_seed, t, cfg, perturb)
            chunk_norm = flow.sample_actions(bundle.net, ctx, q, denoise_steps, noise_rng)
            chunk = bundle.dataset.denormalize(chunk_norm)
            for a in chunk:
                state = toyworld.step(state, a)
                t += 1
                if toyworld.evaluate_success(state):
                    done = True
                    break
                if t >= toyworld.MAX_EPISODE_STEPS:
                    break
        if toyworld.evaluate_success(state):
            successes += 1
    return successes / rollouts


# -- experiments ---------------------------------------------------------


def _dataset_for(cfg, h: int, seed: int, cache: dict) -> toyworld.Dataset:
    key = (h, seed, cfg.observe, cfg.occlusion_config().side)
    if key not in cache:
        cache[key] = toyworld.generate_dataset(
            cfg.episodes, h, seed, occlusion=cfg.occlusion_config(),
            with_views=cfg.observe == "views",
            layout=toyworld.LayoutParams(spread=cfg.layout_spread),
            depth_noise_std=cfg.depth_noise_std, view_noise_std=cfg.view_noise_std,
            mono_noise_std=cfg.mono_noise_std,
        )
    return cache[key]


def ablation_grid(cfg, log=None) -> list[MetricsRow]:
    """Denoising-steps x chunk-size x head-kind grid; one training per
    (kind, h, seed) cell, evaluated at every step count."""
    rows = []
    cache: dict = {}
    for kind in cfg.grid_kinds:
        for h in cfg.grid_chunks:
            for seed in cfg.seeds:
                ds = _dataset_for(cfg, h, seed, cache)
                bundle, _, losses = train_policy(cfg, kind, h, seed, ds)
                for steps_n in cfg.grid_steps:
                    rate = eval_policy(cfg, bundle, steps_n, seed)
                    row = MetricsRow(
                        run_id=f"aml-{kind}-n{steps_n}-h{h}-s{seed}", seed=seed,
                        experiment="ablation_grid", head_kind=kind,
                        denoise_steps=steps_n, chunk_h=h,
                        success_rate=rate, final_loss=losses[-1],
                    )
                    rows.append(row)
                    if log:
                        log(f"{row.run_id}: success_rate={rate:.3f}")
    return rows


def grid_degradation(rows: list[MetricsRow], steps_n: int, h_low: int, h_high: int) -> dict:
    """Per-kind, per-seed success change going from h_low to h_high."""
    table = {}
    for row in rows:
        if row.denoise_steps != steps_n:
            continue
        table[(row.head_kind, row.chunk_h, row.seed)] = row.success_rate
    deltas: dict = {}
    for (kind, h, seed) in list(table):
        if h != h_high:
            continue
        base = table.get((kind, h_low, seed))
        if base is not None:
            deltas.setdefault(kind, {})[seed] = table[(kind, h_high, seed)] - base
    return deltas


def fusion_ablation(cfg, log=None) -> list[MetricsRow]:
    rows = []
    cache: dict = {}
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            scfg = replace(cfg, strategy=strategy, observe="views")
            ds = _dataset_for(scfg, cfg.chunk_h, seed, cache)
            bundle, _, losses = train_policy(scfg, cfg.head, cfg.chunk_h, seed, ds)
            rate = eval_policy(scfg, bundle, cfg.denoise_steps, seed)
            row = MetricsRow(
                run_id=f"fusion-{strategy}-s{seed}", seed=seed, experiment="fusion_ablation",
                head_kind=cfg.head, fusion_strategy=strategy,
                denoise_steps=cfg.denoise_steps, chunk_h=cfg.chunk_h,
                success_rate=rate, final_loss=losses[-1],
            )
            if strategy == g3t.G3T:
                clean, corr = gate_statistics(scfg, bundle, n_scenes=cfg.gate_scenes, seed=seed)
                row.gate_mean_clean = clean
                row.gate_mean_corrupted = corr
            rows.append(row)
            if log:
                log(f"{row.run_id}: success_rate={rate:.3f}")
    return rows


def gate_statistics(cfg, bundle: ModelBundle, n_scenes: int, seed: int) -> tuple[float, float]:
    """Mean gate weight assigned to the clean vs the corrupted side view.

    The gate value is the left view's fusion weight per token (the right
    view's is its complement), so the per-side means are complements; with
    no occlusion configured the "corrupted" slot reports the left view."""
    occ = bundle.dataset.occlusion
    left_weights = []
    for i in range(n_scenes):
        scene_seed = 9_000_000 + seed * 131 + i
        state = toyworld.reset(scene_seed, toyworld.LayoutParams(spread=cfg.layout_spread))
        render = toyworld.render_views(state, occ, RngStream(scene_seed, 77), cfg.depth_noise_std,
                                       cfg.view_noise_std, cfg.mono_noise_std)
        with no_grad():
            _, gate = bundle.stack.forward_g3t(render.mono, render.left, render.right, return_gate=True)
        left_weights.append(gate.data.reshape(-1))
    left_mean = float(np.concatenate(left_weights).mean())
    corrupted = left_mean if occ.side != "right" else 1.0 - left_mean
    return 1.0 - corrupted, corrupted


# -- depth probe ---------------------------------------------------------


def _fit_linear_probe(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares probe with bias; ridge fallback when rank-deficient."""
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w, _, rank, _ = np.linalg.lstsq(xb, y, rcond=None)
    if rank < xb.shape[1]:
        lam = 1e-4
        w = np.linalg.solve(xb.T @ xb + lam * np.eye(xb.shape[1]), xb.T @ y)
        return w, True
    return w, False


def _probe_predict(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1) @ w


def depth_metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    absrel = float(np.mean(np.abs(pred - truth) / truth))
    ratio = np.maximum(pred / truth, truth / pred)
    delta1 = float(np.mean(ratio < 1.25))
    return {"rmse": rmse, "absrel": absrel, "delta1": delta1}


def _probe_features(cfg, bundle: ModelBundle, scene_seeds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per main-view token: raw monocular features, fused features, depth truth."""
    n = toyworld.N_TOKENS
    mono_rows, fused_rows, depths = [], [], []
    occ = bundle.dataset.occlusion
    for s in scene_seeds:
        state = toyworld.reset(s, toyworld.LayoutParams(spread=cfg.layout_spread))
        render = toyworld.render_views(state, occ, RngStream(s, 77), cfg.depth_noise_std,
                                       cfg.view_noise_std, cfg.mono_noise_std)
        with no_grad():
            geo = bundle.stack.forward_g3t(render.mono, render.left, render.right).data
        mono_rows.append(render.mono)
        # main-view slot i pairs with the fused-view token at the same
        # lattice index (the side views are small affine shifts)
        fused_rows.append(np.concatenate([geo[:n], geo[n:]], axis=1))
        depths.append(render.depth_truth)
    return (np.concatenate(mono_rows), np.concatenate(fused_rows), np.concatenate(depths))


def depth_probe(cfg, seed: int, bundle: ModelBundle | None = None, log=None) -> list[MetricsRow]:
    cache: dict = {}
    pcfg = replace(cfg, observe="views", strategy=g3t.G3T)
    if bundle is None:
        ds = _dataset_for(pcfg, cfg.chunk_h, seed, cache)
        bundle, _, _ = train_policy(pcfg, cfg.head, cfg.chunk_h, seed, ds)
    train_seeds = [9_500_000 + seed * 577 + i for i in range(cfg.probe_train_scenes)]
    test_seeds = [9_700_000 + seed * 577 + i for i in range(cfg.probe_test_scenes)]
    mono_tr, fused_tr, d_tr = _probe_features(pcfg, bundle, train_seeds)
    mono_te, fused_te, d_te = _probe_features(pcfg, bundle, test_seeds)
    rows = []
    for name, xtr, xte in (("mono", mono_tr, mono_te), ("fused", fused_tr, fused_te)):
        w, _ridge = _fit_linear_probe(xtr, d_tr)
        m = depth_metrics(_probe_predict(w, xte), d_te)
        rows.append(MetricsRow(
            run_id=f"depth-{name}-s{seed}", seed=seed, experiment="depth_probe",
            head_kind=cfg.head, fusion_strategy=name, chunk_h=cfg.chunk_h,
            probe_rmse=m["rmse"], probe_absrel=m["absrel"],
        ))
        if log:
            log(f"{rows[-1].run_id}: rmse={m['rmse']:.4f} absrel={m['absrel']:.4f}")
    return rows


# -- gate map export -----------------------------------------------------


def export_gate_maps(cfg, bundle: ModelBundle, n_scenes: int, seed: int, path):
    occ = bundle.dataset.occlusion
    mask_l = occ.corrupted_mask() if occ.side == "left" else np.zeros(toyworld.N_TOKENS, dtype=bool)
    mask_r = occ.corrupted_mask() if occ.side == "right" else np.zeros(toyworld.N_TOKENS, dtype=bool)
    with open(path, "w", newline="") as f:
        f.write("token_index,row,col,gate,corrupted_left,corrupted_right\n")
        for i in range(n_scenes):
            scene_seed = 9_900_000 + seed * 211 + i
            state = toyworld.reset(scene_seed, toyworld.LayoutParams(spread=cfg.layout_spread))
            render = toyworld.render_views(state, occ, RngStream(scene_seed, 77), cfg.depth_noise_std,
                                           cfg.view_noise_std, cfg.mono_noise_std)
            with no_grad():
                _, gate = bundle.stack.forward_g3t(render.mono, render.left, render.right, return_gate=True)
            g = gate.data.reshape(-1)
            for tok in range(toyworld.N_TOKENS):
                r, c = divmod(tok, toyworld.GRID)
                f.write(f"{tok},{r},{c},{g[tok]:.10g},{int(mask_l[tok])},{int(mask_r[tok])}\n")


# -- reporting -----------------------------------------------------------


def aggregate_rows(rows: list[dict], group_keys: list[str], value_key: str) -> list[dict]:
    groups: dict = {}
    for row in rows:
        key = tuple(row[k] for k in group_keys)
        groups.setdefault(key, []).append(float(row[value_key]))
    out = []
    for key, vals in groups.items():
        arr = np.asarray(vals)
        rec = dict(zip(group_keys, key))
        rec["mean"] = float(arr.mean())
        rec["std"] = float(arr.std())
        rec["n"] = len(vals)
        out.append(rec)
    return out


def write_svg_lines(path, series: dict, title: str, x_label: str, y_label: str):
    """Minimal line plot: one polyline per named series of (x, y) pairs."""
    width, height, pad = 640, 420, 60
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("no data to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<text x="{width/2}" y="{height-12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="16" y="{height/2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {height/2})">{y_label}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
    ]
    for i, (name, data) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(data))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        lines.append(f'<text x="{width-pad+4}" y="{pad + 16*i}" font-size="11" fill="{color}">{name}</text>')
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def emit_report(metrics_dir, out_dir=None):
    import os

    out_dir = out_dir or metrics_dir
    csvs = sorted(p for p in os.listdir(metrics_dir) if p.endswith("_metrics.csv"))
    if not csvs:
        raise ValueError(f"no data: no *_metrics.csv files under {metrics_dir}")
    for name in csvs:
        rows = read_metrics(os.path.join(metrics_dir, name))
        if not rows:
            raise ValueError(f"no data in {name}")
        experiment = rows[0]["experiment"]
        if experiment == "ablation_grid":
            agg = aggregate_rows(rows, ["head_kind", "denoise_steps", "chunk_h"], "success_rate")
            _write_agg_csv(os.path.join(out_dir, "ablation_grid_summary.csv"), agg)
            series_h: dict = {}
            series_n: dict = {}
            for rec in agg:
                series_h.setdefault(f"{rec['head_kind']}-n{rec['denoise_steps']}", []).append(
                    (int(rec["chunk_h"]), rec["mean"]))
                series_n.setdefault(f"{rec['head_kind']}-h{rec['chunk_h']}", []).append(
                    (int(rec["denoise_steps"]), rec["mean"]))
            write_svg_lines(os.path.join(out_dir, "success_vs_chunk.svg"), series_h,
                            "Success vs chunk size", "chunk size H", "success rate")
            write_svg_lines(os.path.join(out_dir, "success_vs_steps.svg"), series_n,
                            "Success vs denoising steps", "denoising steps", "success rate")
        elif experiment == "fusion_ablation":
            agg = aggregate_rows(rows, ["fusion_strategy"], "success_rate")
            _write_agg_csv(os.path.join(out_dir, "fusion_summary.csv"), agg)
        elif experiment == "depth_probe":
            agg = aggregate_rows(rows, ["fusion_strategy"], "probe_rmse")
            _write_agg_csv(os.path.join(out_dir, "depth_probe_summary.csv"), agg)
            series = {rec["fusion_strategy"]: [(0, rec["mean"]), (1, rec["mean"])] for rec in agg}
            write_svg_lines(os.path.join(out_dir, "depth_probe_rmse.svg"), series,
                            "Depth probe RMSE", "", "RMSE")


def _write_agg_csv(path, agg: list[dict]):
    if not agg:
        raise ValueError("no data to aggregate")
    keys = list(agg[0].keys())
    with open(path, "w", newline="") as f:
        f.write(",".join(keys) + "\n")
        for rec in sorted(agg, key=lambda r: tuple(str(r[k]) for k in keys)):
            f.write(",".join(_fmt(rec[k]) for k in keys) + "\n")
