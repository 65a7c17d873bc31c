"""Training loops: two pre-training stages and answer fine-tuning.

Runs are bit-deterministic for a fixed (seed, config, corpus): RNG streams are
spawned from the seed per concern (data order, masking, dropout, init), pools
reshuffle from the data stream, and every piece of mutable state (parameters,
optimizer moments, RNG states, pool cursors, centroid snapshots) is carried in
checkpoints, so resuming from a mid-run checkpoint replays the uninterrupted
run exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (POOL_DATASET_ID, Polarity, Registry, SaevalRecord, TaskType, TASK_ORDER,
                   build_pools, combine_queries, to_polarity)
from .errors import ConfigError, ContractError, NumericError
from .evaluation import evaluate_records
from .masking import apply_modal_setting, sample_mcm_plan, sample_modal_setting
from .model import (ModelConfig, encode, init_params, load_checkpoint, params_from_arrays,
                    params_to_arrays, save_checkpoint)
from .objectives import (CentroidIndex, LossReport, PseudoLabelSet, Stage1Example,
                         Stage2Example, assign_pseudo_labels, build_centroids, generation_loss,
                         stage1_loss, stage2_loss)
from .prompt import Vocab, build_prompt, build_vocab, tokenize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimization settings. The defaults mirror the reference recipe for the
    base text backbone (lr 5e-6, batch 64, dropout 0.1, 40 epochs); tests and
    desk runs override them freely."""

    learning_rate: float = 5e-6
    batch_size: int = 64
    dropout_rate: float = 0.1
    epochs: int = 40
    seed: int = 0
    max_steps: int | None = None
    mask_prob: float = 0.5
    grad_clip: float = 1.0
    centroid_refresh_every: int = 200
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # mcm, spp, ccl, cep
    checkpoint_every: int | None = None
    validate_every_epochs: int = 1
    modal_mask_augment: bool = True
    num_speakers: int = 16
    max_new_tokens: int = 8

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if not (0.0 <= self.mask_prob <= 1.0):
            raise ConfigError(f"mask_prob {self.mask_prob} outside [0, 1]")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights must have four entries (mcm, spp, ccl, cep)")
        return self

    def to_json(self):
        out = asdict(self)
        out["loss_weights"] = list(self.loss_weights)
        return out

    @classmethod
    def from_json(cls, obj):
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        cfg = cls(**obj)
        cfg.loss_weights = tuple(cfg.loss_weights)
        return cfg


class Adam:
    """Plain Adam with bias correction; no schedule, fixed betas and eps."""

    def __init__(self, params, lr):
        self.lr = float(lr)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)

    def state_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"adam_m/{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam_v/{name}"] = arr
        return out

    def load_state(self, params, arrays, t):
        self.t = int(t)
        for name, p in params.items():
            for prefix, store in (("adam_m", self.m), ("adam_v", self.v)):
                key = f"{prefix}/{name}"
                if key not in arrays or arrays[key].shape != p.data.shape:
                    raise ConfigError(f"checkpoint optimizer state missing or misshapen for {name!r}")
                store[name] = np.asarray(arrays[key], dtype=np.float64).copy()


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = ad.global_grad_norm(params.values())
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# sampling state


class IndexPool:
    """A shuffled pass over a fixed index set; reshuffles (from the shared
    data stream) when exhausted, so draws are without replacement per pass."""

    def __init__(self, indices, rng):
        self.indices = np.asarray(sorted(indices), dtype=np.int64)
        if self.indices.size == 0:
            raise ConfigError("cannot build a pool over zero records")
        self.perm = rng.permutation(self.indices)
        self.cursor = 0

    def draw(self, n, rng):
        out = []
        while len(out) < n:
            if self.cursor == self.perm.size:
                self.perm = rng.permutation(self.indices)
                self.cursor = 0
            take = min(n - len(out), self.perm.size - self.cursor)
            out.extend(int(i) for i in self.perm[self.cursor:self.cursor + take])
            self.cursor += take
        return out

    def state(self):
        return {"perm": [int(i) for i in self.perm], "cursor": self.cursor}

    def load_state(self, state):
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.cursor = int(state["cursor"])


class TaskPools:
    """One pool per task family plus the rotation offset that deals out the
    batch remainder fairly across steps."""

    def __init__(self, records, rng):
        by_task = {t: [] for t in TASK_ORDER}
        for i, record in enumerate(records):
            by_task[record.task_type].append(i)
        empty = [t.value for t in TASK_ORDER if not by_task[t]]
        if empty:
            raise ConfigError(f"task-average sampling needs records for every task; missing {empty}")
        self.pools = {t: IndexPool(by_task[t], rng) for t in TASK_ORDER}
        self.rotation = int(rng.integers(len(TASK_ORDER)))

    def state(self):
        return {"rotation": self.rotation,
                "pools": {t.value: self.pools[t].state() for t in TASK_ORDER}}

    def load_state(self, state):
        self.rotation = int(state["rotation"])
        for t in TASK_ORDER:
            self.pools[t].load_state(state["pools"][t.value])


def task_average_sample(task_pools, batch_size, rng):
    """Draw a batch with per-task counts equal to floor(batch/4), the
    remainder rotating across tasks so per-step and cumulative counts never
    differ by more than one."""
    base = batch_size // len(TASK_ORDER)
    rem = batch_size - base * len(TASK_ORDER)
    counts = {t: base for t in TASK_ORDER}
    for i in range(rem):
        counts[TASK_ORDER[(task_pools.rotation + i) % len(TASK_ORDER)]] += 1
    task_pools.rotation = (task_pools.rotation + rem) % len(TASK_ORDER)
    batch = []
    for t in TASK_ORDER:
        if counts[t] == 0:
            continue
        for idx in task_pools.pools[t].draw(counts[t], rng):
            batch.append((t, idx))
    return batch


class PolarityPools:
    """Stage-one pair pools: one index pool per polarity with at least two
    members, plus a rotation so batch slots cycle the polarities."""

    def __init__(self, records, rng):
        groups = build_pools(records)
        self.order = [pol for pol in Polarity if len(groups[pol].records) >= 2]
        if not self.order:
            raise ConfigError("stage-one training needs a polarity pool with at least two records")
        index_of = {}
        for pol in self.order:
            index_of[pol] = [i for i, r in enumerate(records)
                             if to_polarity(r.label, r.dataset_id) is pol]
        self.pools = {pol: IndexPool(index_of[pol], rng) for pol in self.order}
        self.rotation = int(rng.integers(len(self.order)))

    def draw_pairs(self, n_pairs, rng):
        """n_pairs (polarity, i, j) triples, cycling pools across slots. A
        pool exhausted mid-pass pairs its tail with the next pass head."""
        out = []
        for s in range(n_pairs):
            pol = self.order[(self.rotation + s) % len(self.order)]
            i, j = self.pools[pol].draw(2, rng)
            out.append((pol, i, j))
        self.rotation = (self.rotation + n_pairs) % len(self.order)
        return out

    def pairs_per_pass(self):
        return sum(self.pools[pol].indices.size // 2 for pol in self.order)

    def state(self):
        return {"rotation": self.rotation,
                "pools": {pol.value: self.pools[pol].state() for pol in self.order}}

    def load_state(self, state):
        self.rotation = int(state["rotation"])
        for pol in self.order:
            self.pools[pol].load_state(state["pools"][pol.value])


# ---------------------------------------------------------------------------
# run state


def _spawn_rngs(seed):
    root = np.random.SeedSequence(int(seed))
    init_ss, data_ss, mask_ss, drop_ss = root.spawn(4)
    make = lambda ss: np.random.Generator(np.random.PCG64(ss))
    return {"init": make(init_ss), "data": make(data_ss),
            "mask": make(mask_ss), "dropout": make(drop_ss)}


def _rng_states(rngs):
    return {k: g.bit_generator.state for k, g in rngs.items() if k != "init"}


def _restore_rngs(states):
    out = {}
    for name, state in states.items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = state
        out[name] = g
    return out


def _centroids_to_json(index):
    if index is None:
        return None
    out = {}
    for task in index.tasks():
        out[task.value] = {lab: [float(x) for x in vec] for lab, vec in index.by_task[task]}
    return out


def _centroids_from_json(obj):
    if obj is None:
        return None
    by_task = {}
    for task_value, groups in obj.items():
        task = TaskType(task_value)
        by_task[task] = tuple(sorted(((lab, np.asarray(vec, dtype=np.float64))
                                      for lab, vec in groups.items()), key=lambda x: x[0]))
    return CentroidIndex(by_task=by_task)


def _pseudo_to_json(pseudo_list):
    if pseudo_list is None:
        return None
    return [{t.value: lab for t, lab in p.labels.items()} for p in pseudo_list]


def _pseudo_from_json(obj):
    if obj is None:
        return None
    return [PseudoLabelSet(labels={TaskType(k): v for k, v in entry.items()}) for entry in obj]


class _Run:
    """Shared plumbing for the three training loops."""

    def __init__(self, stage, records, registry, model_config, train_config, out_dir,
                 init_checkpoint=None, resume_from=None):
        if not records:
            raise ConfigError("training corpus is empty")
        train_config.validate()
        self.stage = stage
        self.records = records
        self.registry = registry
        self.train_config = train_config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.step = 0
        self.centroids = None
        self.pseudo = None

        for dataset_id in registry.dataset_ids:
            spec = registry.spec(dataset_id)
            if spec.acoustic_dim is not None and spec.acoustic_dim != model_config.acoustic_dim:
                raise ConfigError(
                    f"dataset {dataset_id!r} declares acoustic_dim {spec.acoustic_dim}, "
                    f"model expects {model_config.acoustic_dim}")
            if spec.visual_dim is not None and spec.visual_dim != model_config.visual_dim:
                raise ConfigError(
                    f"dataset {dataset_id!r} declares visual_dim {spec.visual_dim}, "
                    f"model expects {model_config.visual_dim}")

        source = resume_from or init_checkpoint
        if source is not None:
            ck_config, arrays, meta = load_checkpoint(source)
            self.model_config = replace(ck_config, dropout_rate=train_config.dropout_rate)
            self.vocab = Vocab(meta["vocab"], meta["vocab_datasets"], meta["vocab_speakers"])
            if len(self.vocab) != self.model_config.vocab_size:
                raise ConfigError("checkpoint vocabulary does not match its model config")
            if self.model_config.num_datasets != len(registry):
                raise ConfigError(
                    f"checkpoint expects {self.model_config.num_datasets} datasets, registry has {len(registry)}")
            self.params = params_from_arrays(self.model_config, arrays)
            self.rngs = _spawn_rngs(train_config.seed)
            self.adam = Adam(self.params, train_config.learning_rate)
            if resume_from is not None:
                if meta.get("stage") != stage:
                    raise ConfigError(
                        f"checkpoint holds {meta.get('stage')!r} state, cannot resume {stage!r}")
                self.step = int(meta["step"])
                self.adam.load_state(self.params, arrays, meta["adam_t"])
                self.rngs.update(_restore_rngs(meta["rng"]))
                self.centroids = _centroids_from_json(meta.get("centroids"))
                self.pseudo = _pseudo_from_json(meta.get("pseudo"))
                self._resume_pools = meta.get("pools")
            else:
                self._resume_pools = None
        else:
            self.vocab = build_vocab(records, registry, num_speakers=train_config.num_speakers)
            cfg = replace(model_config, dropout_rate=train_config.dropout_rate)
            if cfg.vocab_size == 0:
                cfg = replace(cfg, vocab_size=len(self.vocab))
            if cfg.num_datasets == 0:
                cfg = replace(cfg, num_datasets=len(registry))
            if cfg.vocab_size != len(self.vocab):
                raise ConfigError(f"model config vocab_size {cfg.vocab_size} != vocabulary size {len(self.vocab)}")
            if cfg.num_datasets != len(registry):
                raise ConfigError(f"model config num_datasets {cfg.num_datasets} != registry size {len(registry)}")
            self.model_config = cfg.validate()
            self.rngs = _spawn_rngs(train_config.seed)
            self.params = init_params(self.model_config, self.rngs["init"])
            self.adam = Adam(self.params, train_config.learning_rate)
            self._resume_pools = None

        self.metrics_path = self.out_dir / "metrics.jsonl"
        self._metrics_fh = open(self.metrics_path, "w", encoding="utf-8")

    def log_step(self, report):
        line = json.dumps({
            "step": self.step,
            "stage": self.stage,
            "mcm": report.mcm,
            "spp": report.spp,
            "ccl": report.ccl,
            "cep": report.cep,
            "total": report.total,
            "lr": self.train_config.learning_rate,
        })
        self._metrics_fh.write(line + "\n")
        self._metrics_fh.flush()

    def check_finite(self, report):
        vals = (report.mcm, report.spp, report.ccl, report.cep, report.total)
        if not all(np.isfinite(v) for v in vals):
            raise NumericError(
                f"non-finite loss at step {self.step}: mcm={report.mcm} spp={report.spp} "
                f"ccl={report.ccl} cep={report.cep} total={report.total}")

    def optimize(self, total):
        ad.zero_grads(self.params.values())
        ad.backward(total)
        clip_gradients(self.params, self.train_config.grad_clip)
        self.adam.step(self.params)

    def save(self, path, pools_state):
        meta = {
            "stage": self.stage,
            "step": self.step,
            "vocab": self.vocab.tokens,
            "vocab_datasets": self.vocab.num_datasets,
            "vocab_speakers": self.vocab.num_speakers,
            "adam_t": self.adam.t,
            "rng": _rng_states(self.rngs),
            "pools": pools_state,
            "centroids": _centroids_to_json(self.centroids),
            "pseudo": _pseudo_to_json(self.pseudo),
            "train_config": self.train_config.to_json(),
        }
        arrays = dict(params_to_arrays(self.params))
        arrays.update(self.adam.state_arrays())
        save_checkpoint(path, self.model_config, arrays, meta=meta)
        return Path(path)

    def finish(self, pools_state):
        self._metrics_fh.close()
        return self.save(self.out_dir / "checkpoint.ckpt", pools_state)

    def maybe_periodic_save(self, pools_state):
        every = self.train_config.checkpoint_every
        if every and self.step % every == 0:
            self.save(self.out_dir / f"checkpoint_step{self.step}.ckpt", pools_state)

    def total_steps(self, units_per_pass):
        cfg = self.train_config
        if cfg.max_steps is not None:
            return cfg.max_steps
        steps_per_epoch = max(1, units_per_pass // cfg.batch_size)
        return cfg.epochs * steps_per_epoch

    def pool_rng(self):
        """Generator for initial pool construction. When resuming, pool state
        is about to be overwritten from the checkpoint, so construction must
        not consume the restored data stream."""
        return self.rngs["data"] if self._resume_pools is None else np.random.default_rng(0)


def run_pretrain_stage1(records, registry, model_config, train_config, out_dir, resume_from=None):
    """First pre-training stage on combined same-polarity query pairs.
    Registry must declare the reserved pool dataset. Returns the final
    checkpoint path."""
    if POOL_DATASET_ID not in registry:
        raise ConfigError(
            f"stage one needs the reserved dataset {POOL_DATASET_ID!r} declared in the registry")
    run = _Run("pretrain1", records, registry, model_config, train_config, out_dir,
               resume_from=resume_from)
    cfg = run.train_config
    pools = PolarityPools(records, run.pool_rng())
    if run._resume_pools is not None:
        pools.load_state(run._resume_pools)

    total_steps = run.total_steps(2 * pools.pairs_per_pass())
    while run.step < total_steps:
        run.step += 1
        batch = []
        for pol, i, j in pools.draw_pairs(cfg.batch_size, run.rngs["data"]):
            combined = combine_queries(records[i], records[j])
            ps = build_prompt(combined, run.vocab, registry, run.model_config.max_len)
            if cfg.modal_mask_augment:
                setting = sample_modal_setting(ps, run.rngs["mask"])
                ps = apply_modal_setting(ps, setting)
            plan = sample_mcm_plan(ps, cfg.mask_prob, run.rngs["mask"], run.vocab)
            batch.append(Stage1Example(prompt=ps, plan=plan, polarity=pol))
        report, total = stage1_loss(batch, run.params, run.model_config, run.vocab,
                                    weights=cfg.loss_weights[:3], train=True,
                                    rng=run.rngs["dropout"])
        run.check_finite(report)
        run.optimize(total)
        run.log_step(report)
        run.maybe_periodic_save(pools.state())
    return run.finish(pools.state())


def _refresh_centroids(run):
    """Frozen-snapshot pass: clean encodings of the full corpus with all
    modalities, grouped by gold label, plus per-record pseudo assignments."""
    items = []
    pooled = []
    for record in run.records:
        ps = build_prompt(record, run.vocab, run.registry, run.model_config.max_len)
        enc = encode(ps, run.params, run.model_config, run.vocab, mask_plan=None, train=False)
        vec = enc.pooled.data.copy()
        key = run.registry.spec(record.dataset_id).answer.render(record.label)
        items.append((record.task_type, key, vec))
        pooled.append(vec)
    run.centroids = build_centroids(items)
    run.pseudo = [assign_pseudo_labels(pooled[i], run.centroids, run.records[i].task_type,
                                       items[i][1])
                  for i in range(len(run.records))]


def run_pretrain_stage2(records, registry, model_config, train_config, out_dir,
                        init_checkpoint=None, resume_from=None):
    """Second pre-training stage (reconstruction + cross-task prediction) on
    original records, normally initialized from the stage-one checkpoint."""
    run = _Run("pretrain2", records, registry, model_config, train_config, out_dir,
               init_checkpoint=init_checkpoint, resume_from=resume_from)
    cfg = run.train_config
    pool = IndexPool(range(len(records)), run.pool_rng())
    if run._resume_pools is not None:
        pool.load_state(run._resume_pools)

    total_steps = run.total_steps(len(records))
    while run.step < total_steps:
        run.step += 1
        if run.centroids is None or (run.step - 1) % cfg.centroid_refresh_every == 0:
            _refresh_centroids(run)
        batch = []
        for idx in pool.draw(cfg.batch_size, run.rngs["data"]):
            record = records[idx]
            ps = build_prompt(record, run.vocab, registry, run.model_config.max_len)
            if cfg.modal_mask_augment:
                setting = sample_modal_setting(ps, run.rngs["mask"])
                ps = apply_modal_setting(ps, setting)
            plan = sample_mcm_plan(ps, cfg.mask_prob, run.rngs["mask"], run.vocab)
            batch.append(Stage2Example(prompt=ps, plan=plan, pseudo=run.pseudo[idx]))
        report, total = stage2_loss(batch, run.params, run.model_config, run.vocab, run.centroids,
                                    weights=(cfg.loss_weights[0], cfg.loss_weights[3]),
                                    train=True, rng=run.rngs["dropout"])
        run.check_finite(report)
        run.optimize(total)
        run.log_step(report)
        run.maybe_periodic_save(pool.state())
    return run.finish(pool.state())


def gold_token_ids(record, registry, vocab):
    spec = registry.spec(record.dataset_id)
    return tokenize(spec.answer.render(record.label), vocab)


def run_finetune(records, registry, model_config, train_config, out_dir,
                 init_checkpoint=None, val_records=None, resume_from=None):
    """Answer-generation fine-tuning with task-average batch sampling and
    modal-combination augmentation. Validation metrics for every registered
    dataset are appended to val_metrics.jsonl once per validation epoch."""
    run = _Run("finetune", records, registry, model_config, train_config, out_dir,
               init_checkpoint=init_checkpoint, resume_from=resume_from)
    cfg = run.train_config
    pools = TaskPools(records, run.pool_rng())
    if run._resume_pools is not None:
        pools.load_state(run._resume_pools)

    steps_per_epoch = max(1, len(records) // cfg.batch_size)
    total_steps = run.total_steps(len(records))
    val_path = run.out_dir / "val_metrics.jsonl"
    val_fh = open(val_path, "w", encoding="utf-8")
    try:
        while run.step < total_steps:
            run.step += 1
            batch = []
            report_batch = []
            for task, idx in task_average_sample(pools, cfg.batch_size, run.rngs["data"]):
                record = records[idx]
                ps = build_prompt(record, run.vocab, registry, run.model_config.max_len)
                if cfg.modal_mask_augment:
                    setting = sample_modal_setting(ps, run.rngs["mask"])
                    ps = apply_modal_setting(ps, setting)
                batch.append((ps, gold_token_ids(record, registry, run.vocab)))
                report_batch.append(task)
            total = generation_loss(batch, run.params, run.model_config, run.vocab,
                                    train=True, rng=run.rngs["dropout"])
            report = LossReport(total=total.item())
            run.check_finite(report)
            run.optimize(total)
            run.log_step(report)
            run.maybe_periodic_save(pools.state())
            if run.step % steps_per_epoch == 0:
                epoch = run.step // steps_per_epoch
                if cfg.validate_every_epochs > 0 and epoch % cfg.validate_every_epochs == 0:
                    results = evaluate_records(val_records if val_records is not None else records,
                                               run.params, run.model_config, run.vocab, registry,
                                               max_new=cfg.max_new_tokens)
                    line = {"step": run.step, "epoch": epoch,
                            "datasets": {d: (results[d].metrics if d in results else None)
                                         for d in registry.dataset_ids}}
                    val_fh.write(json.dumps(line) + "\n")
                    val_fh.flush()
    finally:
        val_fh.close()
    return run.finish(pools.state())
