"""Training loops, evaluation protocol, metrics, and overlay rendering."""

from __future__ import annotations

import base64
import io
import json
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autograd as ag
from . import envsim as es
from . import vkt as vk
from .autograd import AdamState, Tensor, adam_step, seed_rng, zero_grads

PHASE_VKT = "vkt_backbone"
PHASE_HEAD = "head_only"
PHASE_BCT = "bct_end_to_end"
PHASES = (PHASE_VKT, PHASE_HEAD, PHASE_BCT)

GRIPPER_DIM = 1  # reserved scalar appended to joint deltas
DEFAULT_MAX_ROLLOUT_STEPS = 80
CHAIN_EVAL_TASKS = 3


class PhaseIsolationError(RuntimeError):
    pass


class RecipeError(ValueError):
    pass


@dataclass
class TrainRecipe:
    phase: str
    steps: int = 6000
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    data_paths: tuple = ()
    env_ids: tuple = ()
    augment: bool = False
    log_interval: int = 50
    checkpoint_interval: int = 1000
    warmup_steps: int = 100
    sinkhorn_eps: float = 0.01
    sinkhorn_iters: int = 300
    sinkhorn_tol: float = 1e-5
    correspondence_steps: int = 0
    lr_decay: bool = True
    action_balance: float = 0.0

    def lr_at(self, step):
        """Linear warmup, then (optionally) cosine decay to zero.

        The matching loss behaves like an L1 objective near its optimum (the
        envelope gradient has unit magnitude however small the error), so at
        a constant learning rate the forecast jitters at a scale set by the
        step size instead of settling; decaying the rate recovers the last
        bit of precision, which the deployment endgame depends on.
        """
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if not self.lr_decay or self.steps <= self.warmup_steps:
            return self.lr
        frac = (step - self.warmup_steps) / (self.steps - self.warmup_steps)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))

    def correspondence_weight_at(self, step):
        """Weight of the auxiliary ordered-correspondence term, annealed to zero.

        The matching loss is permutation invariant, which leaves the point
        identities unconstrained early in training and lets the predictions
        collapse onto the dataset-mean chain (conflicting unit-vector pulls
        cancel across the batch). Points are sampled in arc-length order, so
        a plain squared-error term on the ordered sets breaks that symmetry;
        it is faded out linearly and the matching loss is the sole objective
        for the rest of training.
        """
        if self.correspondence_steps <= 0:
            return 0.0
        return max(0.0, 1.0 - step / self.correspondence_steps)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise RecipeError(f"unknown phase {self.phase!r}")
        if self.phase == PHASE_VKT and self.env_ids:
            raise RecipeError("vkt_backbone phase takes no env ids")
        if self.phase in (PHASE_HEAD, PHASE_BCT) and not self.env_ids:
            raise RecipeError(f"{self.phase} phase requires env ids")
        self.data_paths = tuple(self.data_paths)
        self.env_ids = tuple(self.env_ids)


@dataclass
class MetricsRecord:
    step: int
    phase: str
    seed: int
    loss: float = None
    agent: str = None
    env: str = None
    success_rate: float = None
    success_length: float = None
    relative_precision: float = None
    wall_clock_seconds: float = None

    def to_line(self):
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None},
                          sort_keys=True)


def append_metrics(path, record: MetricsRecord):
    with open(path, "a", encoding="utf-8") as f:
        f.write(record.to_line() + "\n")


class EpisodeStore:
    """Episodes of one dataset with phase-isolation guards on field access."""

    def __init__(self, path, phase):
        self.path = path
        self.phase = phase
        self.episodes = es.dataset_load(path)
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
            self.manifest = json.load(f)
        self.env_id = self.manifest["robot_variant"]
        self.horizon = self.manifest["H"]
        self.n_points = self.manifest["N_points"]
        self.n_views = self.manifest["n_views"]

    def images(self, ep, t):
        return self.episodes[ep].images[t]

    def instruction(self, ep):
        return self.episodes[ep].task.instruction_id

    def point_set_window(self, ep, t, T):
        if self.phase == PHASE_BCT:
            raise PhaseIsolationError(
                "bct_end_to_end must not read point-set fields")
        sets = self.episodes[ep].point_sets  # (H, V, N, 2)
        idx = np.minimum(np.arange(t, t + T), self.horizon - 1)
        return np.transpose(sets[idx], (1, 0, 2, 3))  # (V, T, N, 2)

    def action_window(self, ep, t, T):
        if self.phase == PHASE_VKT:
            raise PhaseIsolationError(
                "vkt_backbone must not read action fields")
        acts = self.episodes[ep].actions  # (H, dof)
        idx = np.minimum(np.arange(t, t + T), self.horizon - 1)
        window = acts[idx]
        # steps past the episode end hold the final state: zero action
        window = window.copy()
        window[idx == self.horizon - 1] = 0.0
        grip = np.zeros((T, GRIPPER_DIM), dtype=window.dtype)
        return np.concatenate([window, grip], axis=1)

    @property
    def dof(self):
        return self.episodes[0].configs.shape[1]


def action_dim_for(store: EpisodeStore) -> int:
    return store.dof + GRIPPER_DIM


def _load_stores(recipe: TrainRecipe):
    if not recipe.data_paths:
        raise RecipeError("recipe has no data paths")
    stores = [EpisodeStore(p, recipe.phase) for p in recipe.data_paths]
    first = stores[0]
    for s in stores[1:]:
        if (s.n_points, s.n_views, s.horizon) != (first.n_points, first.n_views,
                                                  first.horizon):
            raise RecipeError(
                f"incompatible datasets: {s.path} has "
                f"(N={s.n_points}, V={s.n_views}, H={s.horizon}), expected "
                f"(N={first.n_points}, V={first.n_views}, H={first.horizon})")
    return stores


def _check_config(config: vk.VKTConfig, stores):
    s = stores[0]
    if config.N_points != s.n_points:
        raise RecipeError(f"config N_points={config.N_points} but dataset has "
                          f"{s.n_points}")
    if config.image_size != s.manifest["image_size"]:
        raise RecipeError(f"config image_size={config.image_size} but dataset has "
                          f"{s.manifest['image_size']}")
    if s.n_views > config.V_max:
        raise RecipeError(f"dataset has {s.n_views} views, config V_max={config.V_max}")


def _balance_probs(store: EpisodeStore, c: float):
    """Per-(episode, t) sampling probabilities weighted by 1/(|action| + c).

    Uniform sampling lets the large far-from-goal actions dominate the
    regression, so the head learns the final small corrections — the ones
    that decide whether a rollout settles inside the success radius — only
    to the noise floor. Down-weighting samples by their action magnitude
    balances the two regimes; c sets the floor that keeps zero-action
    (at-goal) states from absorbing all the probability mass.
    """
    mags = np.stack([np.linalg.norm(ep.actions, axis=1)
                     for ep in store.episodes])
    w = 1.0 / (mags + c)
    return (w / w.sum()).ravel()


def _sample_batch(stores, rng, batch_size, T, augment, aug_rng, probs=None):
    """Returns (ids, images, gt_windows or None, action_windows or None, store pick)."""
    pick = int(rng.integers(len(stores)))
    store = stores[pick]
    n_eps = len(store.episodes)
    ids = np.empty(batch_size, dtype=np.int64)
    images = []
    gts = []
    acts = []
    for i in range(batch_size):
        if probs is not None:
            flat = int(rng.choice(n_eps * store.horizon, p=probs))
            ep, t = divmod(flat, store.horizon)
        else:
            ep = int(rng.integers(n_eps))
            t = int(rng.integers(store.horizon))
        ids[i] = store.instruction(ep)
        img = store.images(ep, t).copy()
        if store.phase != PHASE_BCT:
            gt = store.point_set_window(ep, t, T).astype(np.float64)
            if augment:
                for v in range(img.shape[0]):
                    aseed = int(aug_rng.integers(2 ** 31))
                    img[v], gt[v] = es.augment(img[v], gt[v], aseed)
            gts.append(gt)
        if store.phase != PHASE_VKT:
            acts.append(store.action_window(ep, t, T))
        images.append(img)
    images = np.stack(images)
    return (ids, images,
            np.stack(gts) if gts else None,
            np.stack(acts) if acts else None,
            store)


def _write_run_json(out_dir, recipe, config):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump({"recipe": asdict(recipe), "config": config.to_json()},
                  f, indent=2, sort_keys=True)


def train_vkt(recipe: TrainRecipe, config: vk.VKTConfig, out_dir) -> vk.VKT:
    """Backbone training on the point-set matching objective only."""
    if recipe.phase != PHASE_VKT:
        raise RecipeError(f"train_vkt needs phase {PHASE_VKT}, got {recipe.phase}")
    stores = _load_stores(recipe)
    _check_config(config, stores)
    model = vk.VKT(config, seed=recipe.seed)
    _write_run_json(out_dir, recipe, config)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    rng = seed_rng(recipe.seed, "train-vkt")
    aug_rng = seed_rng(recipe.seed, "train-vkt-aug")
    opt = AdamState(lr=recipe.lr)
    t0 = time.time()
    for step in range(1, recipe.steps + 1):
        ids, images, gt, _, _ = _sample_batch(
            stores, rng, recipe.batch_size, config.T, recipe.augment, aug_rng)
        zero_grads(model.params)
        out = model.forecast(ids, images)
        loss = vk.vkt_loss(out, gt, eps=recipe.sinkhorn_eps,
                           max_iters=recipe.sinkhorn_iters, tol=recipe.sinkhorn_tol)
        w = recipe.correspondence_weight_at(step)
        total = loss
        if w > 0.0 and out.point_sets.shape == gt.shape:
            aux = ag.mse(out.point_sets,
                         vk.clamp_ground_truth(gt).astype(np.float32))
            total = ag.add(loss, ag.scale(aux, w))
        total.backward()
        opt.lr = recipe.lr_at(step)
        adam_step(model.params, opt)
        if step % recipe.log_interval == 0 or step == recipe.steps:
            append_metrics(metrics_path, MetricsRecord(
                step=step, phase=recipe.phase, seed=recipe.seed,
                loss=float(loss.data), agent="vkt",
                wall_clock_seconds=time.time() - t0))
        if step % recipe.checkpoint_interval == 0 or step == recipe.steps:
            vk.save_model(model, out_dir)
    return model


def _embedding_cache(model: vk.VKT, store: EpisodeStore):
    """Frozen-backbone kinematics embeddings for every (episode, t) state.

    Returns an array (n_episodes, H, V, T, D), float32.
    """
    flat_ids = []
    flat_imgs = []
    for ep in range(len(store.episodes)):
        for t in range(store.horizon):
            flat_ids.append(store.instruction(ep))
            flat_imgs.append(store.images(ep, t))
    out = []
    chunk = 64
    for k in range(0, len(flat_ids), chunk):
        emb = model.backbone(np.array(flat_ids[k:k + chunk]),
                             np.stack(flat_imgs[k:k + chunk]))
        out.append(emb.data)
    c = model.config
    return np.concatenate(out).reshape(
        len(store.episodes), store.horizon, store.n_views, c.T, c.D)


def _sample_cached_batch(cache, store: EpisodeStore, rng, batch_size, T,
                         probs=None):
    """(embeddings (B,V,T,D), action windows (B,T,A)) from cached features."""
    embs = []
    acts = []
    for _ in range(batch_size):
        if probs is not None:
            flat = int(rng.choice(len(store.episodes) * store.horizon, p=probs))
            ep, t = divmod(flat, store.horizon)
        else:
            ep = int(rng.integers(len(store.episodes)))
            t = int(rng.integers(store.horizon))
        embs.append(cache[ep, t])
        acts.append(store.action_window(ep, t, T))
    return np.stack(embs), np.stack(acts)


def train_head(recipe: TrainRecipe, backbone_dir, out_dir) -> vk.VKT:
    """Per-environment action head on a frozen backbone."""
    if recipe.phase != PHASE_HEAD:
        raise RecipeError(f"train_head needs phase {PHASE_HEAD}, got {recipe.phase}")
    model = vk.load_model(backbone_dir)
    config = model.config
    stores = _load_stores(recipe)
    _check_config(config, stores)
    by_env = {s.env_id: s for s in stores}
    for env_id in recipe.env_ids:
        if env_id not in by_env:
            raise RecipeError(f"no dataset for env {env_id!r}")
        if env_id not in model.head_ids:
            model.register_action_head(env_id, action_dim_for(by_env[env_id]))
    model.set_backbone_frozen(True)
    _write_run_json(out_dir, recipe, config)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    rng = seed_rng(recipe.seed, "train-head")
    opt = AdamState(lr=recipe.lr)
    t0 = time.time()
    # the backbone is frozen, so kinematics embeddings are a fixed function of
    # (episode, t); precompute them once and train the head on cached features
    cache = {env_id: _embedding_cache(model, by_env[env_id])
             for env_id in recipe.env_ids}
    probs = {env_id: (_balance_probs(by_env[env_id], recipe.action_balance)
                      if recipe.action_balance > 0 else None)
             for env_id in recipe.env_ids}
    for step in range(1, recipe.steps + 1):
        env_id = recipe.env_ids[(step - 1) % len(recipe.env_ids)]
        store = by_env[env_id]
        emb_data, acts = _sample_cached_batch(
            cache[env_id], store, rng, recipe.batch_size, config.T,
            probs[env_id])
        zero_grads(model.params)
        emb = Tensor(emb_data)
        pred = model.action_head(emb, env_id)
        loss = vk.action_loss(pred, acts)
        loss.backward()
        for name, p in model.backbone_params().items():
            if p.grad is not None:
                raise PhaseIsolationError(
                    f"backbone parameter {name} received a gradient while frozen")
        opt.lr = recipe.lr_at(step)
        adam_step(model.params, opt)
        if step % recipe.log_interval == 0 or step == recipe.steps:
            append_metrics(metrics_path, MetricsRecord(
                step=step, phase=recipe.phase, seed=recipe.seed,
                loss=float(loss.data), agent="vkt", env=env_id,
                wall_clock_seconds=time.time() - t0))
        if step % recipe.checkpoint_interval == 0 or step == recipe.steps:
            vk.save_model(model, out_dir)
    model.set_backbone_frozen(False)
    vk.save_model(model, out_dir)
    return model


def train_bct(recipe: TrainRecipe, config: vk.VKTConfig, out_dir) -> vk.VKT:
    """End-to-end action regression on the identical backbone architecture."""
    if recipe.phase != PHASE_BCT:
        raise RecipeError(f"train_bct needs phase {PHASE_BCT}, got {recipe.phase}")
    stores = _load_stores(recipe)
    _check_config(config, stores)
    by_env = {s.env_id: s for s in stores}
    model = vk.VKT(config, seed=recipe.seed)
    for env_id in recipe.env_ids:
        if env_id not in by_env:
            raise RecipeError(f"no dataset for env {env_id!r}")
        model.register_action_head(env_id, action_dim_for(by_env[env_id]))
    _write_run_json(out_dir, recipe, config)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    rng = seed_rng(recipe.seed, "train-bct")
    opt = AdamState(lr=recipe.lr)
    t0 = time.time()
    probs = {env_id: (_balance_probs(by_env[env_id], recipe.action_balance)
                      if recipe.action_balance > 0 else None)
             for env_id in recipe.env_ids}
    for step in range(1, recipe.steps + 1):
        env_id = recipe.env_ids[(step - 1) % len(recipe.env_ids)]
        store = by_env[env_id]
        ids, images, _, acts, _ = _sample_batch(
            [store], rng, recipe.batch_size, config.T, False, None,
            probs[env_id])
        zero_grads(model.params)
        pred = model.bct_forward(ids, images, env_id)
        loss = vk.action_loss(pred, acts)
        loss.backward()
        opt.lr = recipe.lr_at(step)
        adam_step(model.params, opt)
        if step % recipe.log_interval == 0 or step == recipe.steps:
            append_metrics(metrics_path, MetricsRecord(
                step=step, phase=recipe.phase, seed=recipe.seed,
                loss=float(loss.data), agent="bct", env=env_id,
                wall_clock_seconds=time.time() - t0))
        if step % recipe.checkpoint_interval == 0 or step == recipe.steps:
            vk.save_model(model, out_dir)
    return model


# ---------------------------------------------------------------------------
# evaluation


def model_policy(model: vk.VKT, env_id: str):
    """Receding-horizon closure: first action of the T-step prediction."""

    def policy(instruction_id, images):
        emb = model.backbone(np.array([instruction_id]), images[None])
        actions = model.action_head(emb, env_id)
        return actions.data[0, 0]

    return policy


def evaluate(model: vk.VKT, robot_variant: str, n_episodes: int, seed: int,
             agent="vkt", chained=False, n_views=2,
             max_steps=DEFAULT_MAX_ROLLOUT_STEPS) -> MetricsRecord:
    """Mean reach success (or chained success length) over fresh worlds."""
    policy = model_policy(model, robot_variant)
    successes = []
    lengths = []
    t0 = time.time()
    for i in range(n_episodes):
        wseed = int(seed_rng(seed, "eval-world", i).integers(2 ** 31))
        world = es.generate_world(wseed, robot_variant, n_views)
        if chained:
            lengths.append(chained_rollout(policy, world, wseed, max_steps))
        else:
            color = int(seed_rng(seed, "eval-task", i).integers(len(es.COLORS)))
            task = es.Task(instruction_id=color, target_index=color)
            ok, _ = es.rollout_eval(policy, world, task, max_steps)
            successes.append(ok)
    rec = MetricsRecord(step=0, phase="eval", seed=seed, agent=agent,
                        env=robot_variant,
                        wall_clock_seconds=time.time() - t0)
    if chained:
        rec.success_length = float(np.mean(lengths))
    else:
        rec.success_rate = float(np.mean(successes))
    return rec


def chained_rollout(policy, world, seed, max_steps) -> int:
    """Three consecutive reach sub-tasks; returns the consecutive-success count."""
    q = es.home_config(world.robot_variant)
    length = 0
    from . import robot_model as rm
    for k in range(CHAIN_EVAL_TASKS):
        color = int(seed_rng(seed, "chain-task", k).integers(len(es.COLORS)))
        task = es.Task(instruction_id=color, target_index=color)
        target = world.targets[task.target_index][0]
        done = False
        for _ in range(max_steps):
            if np.linalg.norm(rm.end_effector(world.robot, q) - target) <= 0.05:
                done = True
                break
            images = np.stack([es.render_image(world, q, cam)
                               for cam in world.cameras])
            action = np.asarray(policy(task.instruction_id, images))
            q, _ = world.robot.clamp_config(q + action[:world.robot.dof])
        if not done:
            break
        length += 1
    return length


# ---------------------------------------------------------------------------
# overlay rendering


def _png_data_uri(image) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def render_overlay(model: vk.VKT, episode: es.Episode, out_path, step=0):
    """SVG with per-view image, predicted current (red) and next-step (blue)
    points, and ground truth as thin white outlines."""
    c = model.config
    images = episode.images[step]  # (V, S, S, 3)
    V = images.shape[0]
    out = model.forecast(np.array([episode.task.instruction_id]), images[None])
    pred = out.point_sets.data[0]  # (V, T, N, 2)
    size = c.image_size
    margin = 4
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{V * (size + margin)}" height="{size}" '
        f'viewBox="0 0 {V * (size + margin)} {size}">'
    ]
    gt_steps = [min(step + k, episode.horizon - 1) for k in (0, 1)]
    for v in range(V):
        ox = v * (size + margin)
        svg.append(f'<g transform="translate({ox},0)">')
        svg.append(f'<image href="{_png_data_uri(images[v])}" x="0" y="0" '
                   f'width="{size}" height="{size}"/>')
        for gs in gt_steps:
            for x, y in episode.point_sets[gs, v]:
                svg.append(f'<circle cx="{x * size:.3f}" cy="{y * size:.3f}" r="1.2" '
                           f'fill="none" stroke="white" stroke-width="0.3"/>')
        for k, color in ((0, "red"), (1, "blue")):
            for x, y in pred[v, k]:
                svg.append(f'<circle cx="{x * size:.3f}" cy="{y * size:.3f}" r="0.9" '
                           f'fill="{color}"/>')
        svg.append("</g>")
    svg.append("</svg>")
    doc = "\n".join(svg)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(doc)
    return doc


# ---------------------------------------------------------------------------
# reporting


class ReportError(ValueError):
    pass


def load_metrics(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ReportError(f"{path}:{lineno}: malformed metrics line ({e.msg})")
    return records


def report(metrics_paths):
    """Aggregate eval metrics across seeds: mean +/- sample std per (agent, env).

    Returns (text_table, csv_text).
    """
    groups = {}
    for path in metrics_paths:
        for rec in load_metrics(path):
            for metric in ("success_rate", "success_length", "relative_precision"):
                if rec.get(metric) is not None:
                    key = (rec.get("agent", "?"), rec.get("env", "-"), metric)
                    groups.setdefault(key, []).append(float(rec[metric]))
    if not groups:
        raise ReportError("no aggregatable metrics found")
    rows = []
    for (agent, env, metric), vals in sorted(groups.items()):
        arr = np.array(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append((agent, env, metric, len(arr), float(arr.mean()), std))
    header = f"{'agent':<6} {'env':<10} {'metric':<20} {'n':>3} {'mean':>10} {'std':>10}"
    lines = [header, "-" * len(header)]
    for agent, env, metric, n, mu, sd in rows:
        lines.append(f"{agent:<6} {env:<10} {metric:<20} {n:>3} {mu:>10.4f} {sd:>10.4f}")
    csv_lines = ["agent,env,metric,n,mean,std"]
    for agent, env, metric, n, mu, sd in rows:
        csv_lines.append(f"{agent},{env},{metric},{n},{mu!r},{sd!r}")
    return "\n".join(lines), "\n".join(csv_lines)
