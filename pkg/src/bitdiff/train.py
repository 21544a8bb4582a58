"""Training drivers for the three objectives, with per-epoch metrics and
bit-exact resumable checkpoints.

One epoch collects fresh on-policy paths for a batch of problem instances
(lattice problems have a single unconditioned instance), then applies the
selected objective:

- ``diffuco``: one full-path gradient step per epoch.
- ``fkl_mc``: importance-weighted updates over (path, timestep) minibatches.
- ``rkl_rl``: PPO passes over the frozen buffer.

Checkpoints carry parameters, optimizer moments, reward-normalizer state and
the RNG state, so resuming reproduces the uninterrupted run byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .diffusion import exp_schedule, sample_reverse_path
from .energies import (
    BoltzmannTarget,
    EAInstance,
    IsingLattice2D,
    read_instance_text,
    write_instance_text,
)
from .graphs import Graph
from .nets import GnnPolicy, GnnSpec, GraphCondition, MlpPolicy, MlpSpec, param_shapes
from .objectives import (
    AnnealSchedule,
    PpoConfig,
    RewardNormalizer,
    build_buffer,
    diffuco_loss_grad,
    fkl_importance_weights,
    fkl_mc_grad,
    minibatch_plan,
    ppo_minibatch_grad,
)
from .optim import AdamState, LrSchedule, adam_step

__all__ = [
    "Instance",
    "build_instances",
    "build_policy_spec",
    "build_anneal",
    "load_dataset",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "METRICS_HEADER",
]

METRICS_HEADER = "epoch,temperature,loss,mean_energy,entropy_estimate,ess_per_sample"

TEMPERATURE_FLOOR = 1e-9  # keeps temperature*beta == 1 when annealing reaches zero


@dataclass
class Instance:
    """One training problem: an energy model plus the policy conditioning."""

    energy_model: object
    condition: GraphCondition | None = None
    name: str = ""


def build_lattice_model(cfg: RunConfig):
    if cfg.kind == "ising":
        return IsingLattice2D(cfg.lattice_size, cfg.coupling)
    if cfg.instance_file:
        with open(cfg.instance_file, "r", encoding="utf-8") as fh:
            model = read_instance_text(fh.read())
        if not isinstance(model, EAInstance):
            raise ConfigError(f"{cfg.instance_file} does not hold a coupling instance")
        return model
    if cfg.ea_dist == "normal":
        return EAInstance.normal(cfg.lattice_size, cfg.ea_seed)
    return EAInstance.uniform(cfg.lattice_size, cfg.ea_seed)


def load_dataset(dataset_dir: str) -> list[Graph]:
    root = Path(dataset_dir)
    manifest = root / "manifest.json"
    if manifest.exists():
        with open(manifest, "r", encoding="utf-8") as fh:
            files = json.load(fh)["files"]
        paths = [root / f for f in files]
    else:
        paths = sorted(root.glob("graph_*.txt"))
    if not paths:
        raise ConfigError(f"no graphs found in {dataset_dir}")
    graphs = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as fh:
            graphs.append(Graph.from_text(fh.read()))
    return graphs


def build_instances(cfg: RunConfig) -> list[Instance]:
    if cfg.kind in ("ising", "ea"):
        return [Instance(build_lattice_model(cfg), None, cfg.kind)]
    graphs = load_dataset(cfg.dataset_dir)
    out = []
    for i, g in enumerate(graphs):
        co = g.co_problem(cfg.problem, cfg.penalty_a, cfg.penalty_b)
        out.append(Instance(co, GraphCondition(g), f"graph_{i:05d}"))
    return out


def build_policy_spec(cfg: RunConfig):
    value_head = cfg.objective == "rkl_rl"
    if cfg.arch == "mlp":
        return MlpSpec(n_bits=cfg.lattice_size ** 2, hidden=tuple(cfg.hidden),
                       value_head=value_head, kernel_start=cfg.kernel_start)
    return GnnSpec(n_hidden=cfg.n_hidden, n_message_passing=cfg.message_passing,
                   value_head=value_head, kernel_start=cfg.kernel_start)


def build_anneal(cfg: RunConfig) -> AnnealSchedule:
    if cfg.anneal == "linear_to_zero":
        return AnnealSchedule("linear_to_zero", max(1, cfg.epochs), t_start=cfg.t_start)
    return AnnealSchedule(
        "ising_decay",
        max(1, cfg.epochs),
        decay_rate=cfg.anneal_h,
        target_temperature=1.0 / cfg.beta,
    )


def _ppo_config(cfg: RunConfig) -> PpoConfig:
    return PpoConfig(
        clip=cfg.clip,
        value_weight=cfg.value_weight,
        trace_decay=cfg.trace_decay,
        reward_ma_rate=cfg.reward_ma_rate,
        n_path_minibatch=cfg.path_minibatch,
        n_timestep_minibatch=cfg.t_minibatch,
        epochs_per_buffer=cfg.epochs_per_buffer,
    )


def updates_per_epoch(cfg: RunConfig) -> int:
    if cfg.objective == "diffuco":
        return 1
    n_path_chunks = -(-cfg.n_paths // cfg.path_minibatch)
    n_t_chunks = -(-cfg.t_steps // cfg.t_minibatch)
    per_pass = n_path_chunks * n_t_chunks
    if cfg.objective == "fkl_mc":
        return per_pass
    return per_pass * cfg.epochs_per_buffer


def _problem_meta(cfg: RunConfig) -> dict:
    meta = {"kind": cfg.kind, "beta": cfg.beta}
    if cfg.kind == "ising":
        meta.update(lattice_size=cfg.lattice_size, coupling=cfg.coupling)
    elif cfg.kind == "ea":
        meta.update(lattice_size=cfg.lattice_size,
                    instance_text=write_instance_text(build_lattice_model(cfg)))
    else:
        meta.update(problem=cfg.problem, penalty_a=cfg.penalty_a,
                    penalty_b=cfg.penalty_b, dataset_dir=cfg.dataset_dir)
    return meta


def save_checkpoint(
    path,
    cfg: RunConfig,
    policy,
    adam: AdamState,
    normalizer: RewardNormalizer,
    rng,
    epoch_next: int,
) -> None:
    meta = {
        "version": 1,
        "arch": cfg.arch,
        "t_steps": cfg.t_steps,
        "epoch_next": epoch_next,
        "adam_step": adam.step,
        "normalizer": normalizer.state(),
        "rng_state": rng.bit_generator.state,
        "config": dataclasses.asdict(cfg),
        "problem": _problem_meta(cfg),
    }
    arrays = {f"param::{k}": v for k, v in policy.params.items()}
    arrays.update(adam.state_arrays())
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path):
    """Returns (policy, cfg, adam, normalizer, rng, epoch_next, problem_meta)."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        arrays = {k: blob[k] for k in blob.files if k != "meta"}
    cfg = RunConfig(**meta["config"])
    cfg.hidden = tuple(cfg.hidden)
    spec = build_policy_spec(cfg)
    params = {k[len("param::"):]: arrays[k] for k in arrays if k.startswith("param::")}
    if set(params) != set(param_shapes(spec)):
        raise ValueError("checkpoint parameters do not match the architecture")
    if cfg.arch == "mlp":
        policy = MlpPolicy(spec, meta["t_steps"], params)
    else:
        policy = GnnPolicy(spec, meta["t_steps"], params)
    adam = AdamState.from_arrays(
        {k: v for k, v in arrays.items() if k.startswith(("m::", "v::"))},
        step=meta["adam_step"],
    )
    normalizer = RewardNormalizer.from_state(meta["normalizer"])
    rng = np.random.default_rng(0)
    state = meta["rng_state"]
    state["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = state
    return policy, cfg, adam, normalizer, rng, meta["epoch_next"], meta["problem"]


def _select_instances(instances, n: int, rng) -> list:
    if len(instances) <= n:
        return list(instances)
    idx = rng.choice(len(instances), size=n, replace=False)
    return [instances[i] for i in idx]


def _fmt(value) -> str:
    return f"{value:.17g}"


def _epoch_diffuco(policy, inst_batch, schedule, beta_eff, temperature, cfg, adam, lr, rng):
    grads_acc, loss_acc, energy_acc, ent_acc = None, 0.0, 0.0, 0.0
    for inst in inst_batch:
        target = BoltzmannTarget(inst.energy_model, beta_eff)
        paths = sample_reverse_path(policy, schedule, cfg.n_paths, rng, inst.condition)
        loss, grads, stats = diffuco_loss_grad(
            policy, target, schedule, paths, temperature, inst.condition
        )
        loss_acc += loss
        energy_acc += stats["mean_energy"]
        ent_acc += -float(paths.log_q.mean())
        grads_acc = grads if grads_acc is None else {
            k: grads_acc[k] + grads[k] for k in grads
        }
    n = len(inst_batch)
    grads_acc = {k: v / n for k, v in grads_acc.items()}
    adam_step(policy.params, grads_acc, adam, lr())
    return {"loss": loss_acc / n, "mean_energy": energy_acc / n,
            "entropy": ent_acc / n, "ess": None}


def _epoch_fkl(policy, inst_batch, schedule, beta_eff, cfg, adam, lr, rng):
    buffers = []
    loss_acc, n_updates = 0.0, 0
    energy_acc, ent_acc, ess_acc = 0.0, 0.0, 0.0
    for inst in inst_batch:
        target = BoltzmannTarget(inst.energy_model, beta_eff)
        paths = sample_reverse_path(policy, schedule, cfg.n_paths, rng, inst.condition)
        logq_old = paths.log_q
        buffers.append((inst, target, paths, logq_old))
        energy_acc += float(np.mean(inst.energy_model.energy(paths.x0)))
        ent_acc += -float(logq_old.mean())
        _, weights = fkl_importance_weights(paths, logq_old, target, schedule)
        m = len(weights)
        ess_acc += min(1.0, max(1.0 / m, 1.0 / (m * float(weights @ weights))))
    plan = minibatch_plan(cfg.n_paths, cfg.t_steps, cfg.path_minibatch, cfg.t_minibatch, rng)
    for group, k_idx in plan:
        t_idx = cfg.t_steps - k_idx  # episode index -> diffusion time
        grads_acc = None
        for inst, target, paths, logq_old in buffers:
            loss, grads, _ = fkl_mc_grad(
                policy, paths.select(group), logq_old[group], target, schedule,
                t_idx, inst.condition,
            )
            loss_acc += loss
            grads_acc = grads if grads_acc is None else {
                k: grads_acc[k] + grads[k] for k in grads
            }
        grads_acc = {k: v / len(buffers) for k, v in grads_acc.items()}
        adam_step(policy.params, grads_acc, adam, lr())
        n_updates += 1
    n = len(inst_batch)
    return {"loss": loss_acc / max(1, n_updates * n), "mean_energy": energy_acc / n,
            "entropy": ent_acc / n, "ess": ess_acc / n}


def _epoch_ppo(policy, inst_batch, schedule, beta_eff, temperature, cfg, ppo_cfg,
               normalizer, adam, lr, rng):
    buffers = []
    energy_acc, ent_acc = 0.0, 0.0
    for inst in inst_batch:
        target = BoltzmannTarget(inst.energy_model, beta_eff)
        paths = sample_reverse_path(policy, schedule, cfg.n_paths, rng, inst.condition)
        buf = build_buffer(policy, paths, target, schedule, temperature, ppo_cfg,
                           normalizer, inst.condition)
        buffers.append((inst, buf))
        energy_acc += float(np.mean(inst.energy_model.energy(paths.x0)))
        ent_acc += -float(paths.log_q.mean())
    loss_acc, n_updates = 0.0, 0
    for _ in range(ppo_cfg.epochs_per_buffer):
        plan = minibatch_plan(cfg.n_paths, cfg.t_steps, cfg.path_minibatch,
                              cfg.t_minibatch, rng)
        for group, k_idx in plan:
            grads_acc = None
            for inst, buf in buffers:
                loss, grads, _ = ppo_minibatch_grad(
                    policy, buf, ppo_cfg, group, k_idx, inst.condition
                )
                loss_acc += loss
                grads_acc = grads if grads_acc is None else {
                    k: grads_acc[k] + grads[k] for k in grads
                }
            grads_acc = {k: v / len(buffers) for k, v in grads_acc.items()}
            adam_step(policy.params, grads_acc, adam, lr())
            n_updates += 1
    n = len(inst_batch)
    return {"loss": loss_acc / max(1, n_updates * n), "mean_energy": energy_acc / n,
            "entropy": ent_acc / n, "ess": None}


def train(cfg: RunConfig, resume: str | None = None, stop_after: int | None = None) -> dict:
    """Run the configured training loop; writes metrics.csv and checkpoint.npz
    into cfg.out_dir and returns a summary dict.

    `stop_after` interrupts the run after that many epochs (checkpoint and
    metrics reflect the partial run); resuming from the checkpoint continues
    the uninterrupted schedule bit-exactly."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.npz"
    metrics_path = out_dir / "metrics.csv"

    instances = build_instances(cfg)
    schedule = exp_schedule(cfg.t_steps)
    anneal = build_anneal(cfg)
    ppo_cfg = _ppo_config(cfg)
    total_updates = max(1, cfg.epochs * updates_per_epoch(cfg))
    lr_sched = LrSchedule(cfg.lr_max, total_updates)

    if resume is not None:
        policy, loaded_cfg, adam, normalizer, rng, start_epoch, _ = load_checkpoint(resume)
        if dataclasses.asdict(loaded_cfg) != dataclasses.asdict(cfg):
            raise ConfigError("resume checkpoint was produced by a different config")
    else:
        spec = build_policy_spec(cfg)
        if cfg.arch == "mlp":
            policy = MlpPolicy.init(spec, cfg.t_steps, cfg.seed)
        else:
            policy = GnnPolicy.init(spec, cfg.t_steps, cfg.seed)
        adam = AdamState.for_params(policy.params)
        normalizer = RewardNormalizer(cfg.reward_ma_rate)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        start_epoch = 0

    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    save_checkpoint(ckpt_path, cfg, policy, adam, normalizer, rng, start_epoch)
    last_row = None
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        if mode == "w":
            metrics.write(METRICS_HEADER + "\n")
            metrics.flush()
        for epoch in range(start_epoch, end_epoch):
            temperature = max(anneal.temperature(epoch), TEMPERATURE_FLOOR)
            beta_eff = 1.0 / temperature
            inst_batch = _select_instances(instances, cfg.n_instances, rng)
            lr = lambda: lr_sched.lr(adam.step)
            if cfg.objective == "diffuco":
                row = _epoch_diffuco(policy, inst_batch, schedule, beta_eff,
                                     temperature, cfg, adam, lr, rng)
            elif cfg.objective == "fkl_mc":
                row = _epoch_fkl(policy, inst_batch, schedule, beta_eff, cfg, adam, lr, rng)
            else:
                row = _epoch_ppo(policy, inst_batch, schedule, beta_eff, temperature,
                                 cfg, ppo_cfg, normalizer, adam, lr, rng)
            if not math.isfinite(row["loss"]):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}; last-good checkpoint kept"
                )
            ess_txt = "" if row["ess"] is None else _fmt(row["ess"])
            metrics.write(
                f"{epoch},{_fmt(temperature)},{_fmt(row['loss'])},"
                f"{_fmt(row['mean_energy'])},{_fmt(row['entropy'])},{ess_txt}\n"
            )
            metrics.flush()
            save_checkpoint(ckpt_path, cfg, policy, adam, normalizer, rng, epoch + 1)
            last_row = row
    return {
        "checkpoint": str(ckpt_path),
        "metrics": str(metrics_path),
        "epochs_run": end_epoch - start_epoch,
        "final": last_row,
    }
