"""Training loop: phase-scheduled sampling, shared-weight encoding of both
views, symmetric InfoNCE, SGD with 1-epoch warmup + cosine decay, temperature
clamping, checkpointing, and periodic held-out retrieval evaluation.

Every stochastic choice (parameter init, epoch plans, held-out split,
augmentation variants) derives from the master seed plus a purpose tag and
epoch number, never from live generator state, so a save/load/resume
continues bit-identically to an uninterrupted run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mixer as mixer_mod
from .dataset import GROUND, SATELLITE, FeatureSource, Manifest, PairRecord
from .errors import DataError, NumericError
from .index import DescriptorStore, search_batch
from .loss import LossConfig, symmetric_infonce
from .mixer import MixerConfig, MixerParams, init_params, mixer_backward_batch, mixer_forward_batch
from .numerics import SgdConfig, cosine_lr, sgd_step
from .sampling import (
    DssConfig,
    EpochPlan,
    PHASE_DSS,
    PHASE_NNS,
    PHASE_RANDOM,
    build_epoch_plan,
    export_plan_text,
)

TRAINER_MAGIC = b"TRNR"
TRAINER_VERSION = 1

STRATEGY_RANDOM = "random"
STRATEGY_NNS = "nns"
STRATEGY_DSS = "dss"
STRATEGY_NNS_DSS = "nns_dss"
STRATEGIES = (STRATEGY_RANDOM, STRATEGY_NNS, STRATEGY_DSS, STRATEGY_NNS_DSS)


@dataclass(frozen=True)
class TrainConfig:
    mixer: MixerConfig
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 0.001
    momentum: float = 0.0
    loss: LossConfig = LossConfig()
    dss: DssConfig = DssConfig()
    strategy: str = STRATEGY_NNS_DSS
    nns_epochs: int = 1
    dss_refresh_steps: int = 0  # 0: refresh descriptors once per epoch
    eval_every: int = 5  # epochs between held-out evaluations; 0 disables
    eval_fraction: float = 0.2
    seed: int = 0
    checkpoint_dir: str | None = None
    dump_plans: bool = False

    def __post_init__(self):
        if self.epochs < 2:
            raise ValueError("need epochs >= 2 (1-epoch warmup plus cosine decay)")
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == STRATEGY_NNS_DSS and not (0 < self.nns_epochs < self.epochs):
            raise ValueError("need 0 < nns_epochs < epochs for the nns_dss schedule")
        if not (0.0 < self.eval_fraction < 1.0):
            raise ValueError("eval_fraction must be in (0, 1)")

    def echo(self) -> str:
        """Flat key=value rendering of every field (config audit trail)."""
        pairs = []
        for name, value in [
            ("epochs", self.epochs), ("batch_size", self.batch_size),
            ("base_lr", self.base_lr), ("momentum", self.momentum),
            ("strategy", self.strategy), ("nns_epochs", self.nns_epochs),
            ("dss_refresh_steps", self.dss_refresh_steps),
            ("eval_every", self.eval_every), ("eval_fraction", self.eval_fraction),
            ("seed", self.seed),
            ("loss.temperature_mode", self.loss.temperature_mode),
            ("loss.tau", self.loss.tau), ("loss.init_tau", self.loss.init_tau),
            ("loss.label_smoothing", self.loss.label_smoothing),
            ("dss.pool_size", self.dss.pool_size),
            ("dss.batch_quota", self.dss.batch_quota),
            ("mixer.num_maps", self.mixer.num_maps),
            ("mixer.map_height", self.mixer.map_height),
            ("mixer.map_width", self.mixer.map_width),
            ("mixer.num_blocks", self.mixer.num_blocks),
            ("mixer.hidden_dim", self.mixer.hidden),
            ("mixer.out_depth", self.mixer.out_depth),
            ("mixer.out_rows", self.mixer.out_rows),
            ("mixer.use_biases", self.mixer.use_biases),
        ]:
            pairs.append(f"{name}={value}")
        return "\n".join(pairs) + "\n"


@dataclass
class TrainState:
    mixer_cfg: MixerConfig
    params: MixerParams
    velocity: list[np.ndarray] | None
    log_inv_tau: float
    epoch: int
    epoch_step: int
    global_step: int
    plan: EpochPlan | None
    plan_cursor: int
    history: list[str] = field(default_factory=list)
    best_top1: float | None = None
    best_epoch: int | None = None
    seed: int = 0
    config_echo: str = ""

    def tau(self, loss_cfg: LossConfig) -> float:
        if loss_cfg.temperature_mode == "fixed":
            return loss_cfg.tau
        return float(np.exp(-self.log_inv_tau))


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy=entropy).generate_state(1, np.uint64)[0])


def _derived_rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))


class Trainer:
    """Owns the manifest, feature source, and split; drives TrainState."""

    def __init__(self, manifest: Manifest, source: FeatureSource, cfg: TrainConfig):
        self.manifest = manifest
        self.source = source
        self.cfg = cfg
        if len(manifest.records) < cfg.batch_size + 1:
            raise ValueError(
                f"{len(manifest.records)} records cannot fill train batches of "
                f"{cfg.batch_size} plus a held-out split"
            )
        self.train_records, self.eval_records = self._split_records()
        if len(self.train_records) < cfg.batch_size:
            raise ValueError("train split smaller than one batch")
        self.steps_per_epoch = len(self.train_records) // cfg.batch_size
        self.sgd = SgdConfig(
            base_lr=cfg.base_lr,
            total_steps=cfg.epochs * self.steps_per_epoch,
            warmup_steps=self.steps_per_epoch,
            momentum=cfg.momentum,
        )
        self.train_ids = [r.id for r in self.train_records]
        self._rec_by_id = manifest.by_id()
        self._variant_cache: dict[int, dict[int, tuple[int, int]]] = {}

    # ------------------------------------------------------------------
    # dataset split

    def _split_records(self) -> tuple[list[PairRecord], list[PairRecord]]:
        records = sorted(self.manifest.records, key=lambda r: r.id)
        cities = self.manifest.cities
        rng = _derived_rng(self.cfg.seed, 0x73706C)
        if len(cities) >= 2:
            # multi-city data: hold out whole cities so the splits never
            # share a region
            n_hold = max(1, round(len(cities) * self.cfg.eval_fraction))
            order = [cities[i] for i in rng.permutation(len(cities))]
            holdout = set(order[:n_hold])
            train = [r for r in records if r.city not in holdout]
            eval_ = [r for r in records if r.city in holdout]
        else:
            n_hold = max(1, round(len(records) * self.cfg.eval_fraction))
            order = rng.permutation(len(records))
            hold_idx = set(int(i) for i in order[:n_hold])
            train = [r for i, r in enumerate(records) if i not in hold_idx]
            eval_ = [r for i, r in enumerate(records) if i in hold_idx]
        return train, eval_

    # ------------------------------------------------------------------
    # state

    def initial_state(self) -> TrainState:
        params = init_params(self.cfg.mixer, self.cfg.seed)
        lam = float(np.log(1.0 / self.cfg.loss.init_tau))
        return TrainState(
            mixer_cfg=self.cfg.mixer,
            params=params,
            velocity=None,
            log_inv_tau=lam,
            epoch=0,
            epoch_step=0,
            global_step=0,
            plan=None,
            plan_cursor=0,
            history=[],
            best_top1=None,
            best_epoch=None,
            seed=self.cfg.seed,
            config_echo=self.cfg.echo(),
        )

    # ------------------------------------------------------------------
    # feature assembly

    def _variants_for_epoch(self, epoch: int) -> dict[int, tuple[int, int]]:
        """Per-record (ground, satellite) augmentation variant picks."""
        if epoch not in self._variant_cache:
            rng = _derived_rng(self.cfg.seed, 0x617567, epoch)
            picks = {}
            for rec in sorted(self.manifest.records, key=lambda r: r.id):
                ng = self.source.variant_count(rec, GROUND)
                ns = self.source.variant_count(rec, SATELLITE)
                picks[rec.id] = (
                    int(rng.integers(0, ng)) if ng > 1 else 0,
                    int(rng.integers(0, ns)) if ns > 1 else 0,
                )
            self._variant_cache[epoch] = picks
        return self._variant_cache[epoch]

    def _batch_tokens(self, ids: list[int], epoch: int) -> tuple[np.ndarray, np.ndarray]:
        picks = self._variants_for_epoch(epoch)
        g_list, s_list = [], []
        for i in ids:
            rec = self._rec_by_id[i]
            vg, vs = picks[i]
            g_list.append(self.source.tokens(rec, GROUND, vg))
            s_list.append(self.source.tokens(rec, SATELLITE, vs))
        return np.stack(g_list), np.stack(s_list)

    # ------------------------------------------------------------------
    # plans

    def _phase_for_epoch(self, epoch: int) -> str:
        s = self.cfg.strategy
        if s == STRATEGY_RANDOM:
            return PHASE_RANDOM
        if s == STRATEGY_NNS:
            return PHASE_NNS
        if s == STRATEGY_DSS:
            return PHASE_DSS
        return PHASE_NNS if epoch < self.cfg.nns_epochs else PHASE_DSS

    def _similarity_for(self, ids: list[int], state: TrainState) -> np.ndarray:
        """Cosine similarity between current satellite descriptors."""
        recs = [self._rec_by_id[i] for i in ids]
        desc = self._encode_view(recs, state.params, SATELLITE)
        return desc @ desc.T

    def _build_plan(self, state: TrainState, ids: list[int], refresh: int) -> EpochPlan:
        phase = self._phase_for_epoch(state.epoch)
        seed = _derived_seed(self.cfg.seed, 0x706C6E, state.epoch, refresh)
        coords = [self._rec_by_id[i].point for i in ids]
        if phase == PHASE_DSS:
            sims = self._similarity_for(ids, state)
            dss_cfg = self.cfg.dss
            if refresh > 0 and dss_cfg.pool_size > len(ids) - 1:
                # mid-epoch refreshes shrink the candidate set below the
                # configured pool; the batch size is the effective quota
                dss_cfg = replace(dss_cfg, pool_size=len(ids) - 1,
                                  batch_quota=self.cfg.batch_size)
            plan = build_epoch_plan(
                ids, phase, self.cfg.batch_size, coords=coords,
                similarity=sims, dss_cfg=dss_cfg, seed=seed,
            )
        elif phase == PHASE_NNS:
            plan = build_epoch_plan(
                ids, phase, self.cfg.batch_size, coords=coords, seed=seed,
            )
        else:
            plan = build_epoch_plan(ids, phase, self.cfg.batch_size, seed=seed)
        if self.cfg.dump_plans and self.cfg.checkpoint_dir:
            out = Path(self.cfg.checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            suffix = f"_refresh{refresh}" if refresh else ""
            (out / f"epoch{state.epoch:03d}{suffix}.plan").write_text(
                export_plan_text(plan)
            )
        return plan

    # ------------------------------------------------------------------
    # encoding

    def _encode_view(
        self, records: list[PairRecord], params: MixerParams, view: str
    ) -> np.ndarray:
        # base (un-augmented) features: mining and evaluation both score the
        # canonical views
        tokens = np.stack([self.source.tokens(r, view) for r in records])
        out = np.empty((len(records), self.cfg.mixer.descriptor_len))
        chunk = 256
        for lo in range(0, len(records), chunk):
            out[lo:lo + chunk] = mixer_forward_batch(
                tokens[lo:lo + chunk], params, self.cfg.mixer
            )
        return out

    # ------------------------------------------------------------------
    # training

    def _step(self, state: TrainState, ids: list[int]) -> None:
        cfg = self.cfg
        tokens_g, tokens_s = self._batch_tokens(ids, state.epoch)
        desc_g, cache_g = mixer_forward_batch(tokens_g, state.params, cfg.mixer, True)
        desc_s, cache_s = mixer_forward_batch(tokens_s, state.params, cfg.mixer, True)
        tau = state.tau(cfg.loss)
        res = symmetric_infonce(desc_g, desc_s, cfg.loss, tau=tau)
        if not np.isfinite(res.loss):
            raise NumericError(
                f"non-finite loss at epoch {state.epoch} step {state.global_step}; "
                f"batch ids {ids}"
            )
        grads_g = mixer_backward_batch(tokens_g, state.params, cfg.mixer,
                                       res.grad_q, cache_g)
        grads_s = mixer_backward_batch(tokens_s, state.params, cfg.mixer,
                                       res.grad_r, cache_s)
        grad_arrays = [
            a + b for a, b in zip(grads_g.params.as_list(), grads_s.params.as_list())
        ]
        if not cfg.mixer.use_biases:
            grad_arrays[1] = np.zeros_like(grad_arrays[1])
            grad_arrays[3] = np.zeros_like(grad_arrays[3])

        learnable_tau = cfg.loss.temperature_mode == "learnable"
        params_list = state.params.as_list()
        if learnable_tau:
            params_list = params_list + [np.array([state.log_inv_tau])]
            grad_arrays = grad_arrays + [np.array([res.grad_tau * (-tau)])]

        lr = cosine_lr(min(state.global_step, self.sgd.total_steps), self.sgd)
        new_params, new_velocity = sgd_step(
            params_list, grad_arrays, lr, self.sgd, state.velocity
        )
        if learnable_tau:
            lam = float(new_params[-1][0])
            tau_clamped = cfg.loss.clamp(float(np.exp(-lam)))
            state.log_inv_tau = float(np.log(1.0 / tau_clamped))
            new_params = new_params[:-1]
        state.params = MixerParams.from_list(new_params)
        state.velocity = new_velocity
        state.history.append(
            f"{state.epoch}\t{state.global_step}\t{res.loss!r}\t{lr!r}\t-"
        )
        state.epoch_step += 1
        state.global_step += 1

    def _remaining_ids(self, state: TrainState) -> list[int]:
        """Ids of the current plan not yet consumed this epoch. Refreshed
        plans are built over these only, so a refresh never resurrects ids
        that already trained in this epoch."""
        done = {i for b in state.plan.batches[:state.plan_cursor] for i in b}
        in_plan = {i for b in state.plan.batches for i in b}
        return [i for i in self.train_ids if i in in_plan and i not in done]

    def run(self, state: TrainState | None = None, max_steps: int | None = None) -> TrainState:
        """Advance training; stops after cfg.epochs epochs or max_steps more
        optimizer steps, whichever comes first. Resumable: pass the returned
        (or checkpoint-loaded) state back in."""
        cfg = self.cfg
        if state is None:
            state = self.initial_state()
        if state.mixer_cfg != cfg.mixer:
            raise DataError("checkpoint mixer config does not match this trainer")
        if state.config_echo != cfg.echo():
            raise DataError("checkpoint training config does not match this trainer")
        steps_done = 0
        while state.epoch < cfg.epochs:
            if state.plan is None:
                state.plan = self._build_plan(state, self.train_ids, refresh=0)
                state.plan_cursor = 0
                state.epoch_step = 0
            while state.plan_cursor < len(state.plan.batches):
                if max_steps is not None and steps_done >= max_steps:
                    return state
                if (
                    cfg.dss_refresh_steps > 0
                    and state.plan.phase == PHASE_DSS
                    and state.epoch_step > 0
                    and state.epoch_step % cfg.dss_refresh_steps == 0
                    and state.plan_cursor > 0
                ):
                    remaining = self._remaining_ids(state)
                    # pool must leave room for a full batch beyond the anchor
                    if len(remaining) > cfg.batch_size:
                        refresh_idx = state.epoch_step // cfg.dss_refresh_steps
                        state.plan = self._build_plan(state, remaining, refresh_idx)
                        state.plan_cursor = 0
                batch = state.plan.batches[state.plan_cursor]
                self._step(state, batch)
                state.plan_cursor += 1
                steps_done += 1
            self._end_epoch(state)
        return state

    def _end_epoch(self, state: TrainState) -> None:
        cfg = self.cfg
        finished = state.epoch
        do_eval = cfg.eval_every > 0 and (
            (finished + 1) % cfg.eval_every == 0 or finished + 1 == cfg.epochs
        )
        improved = False
        if do_eval and self.eval_records:
            metrics = self.evaluate_holdout(state)
            state.history.append(
                f"{finished}\t{state.global_step}\t-\t-\t{metrics['top1']!r}"
            )
            if state.best_top1 is None or metrics["top1"] > state.best_top1:
                state.best_top1 = metrics["top1"]
                state.best_epoch = finished
                improved = True
        # advance first so saved states resume at the start of the next epoch
        state.epoch += 1
        state.plan = None
        state.plan_cursor = 0
        state.epoch_step = 0
        if cfg.checkpoint_dir:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            if improved:
                checkpoint_save(state, Path(cfg.checkpoint_dir) / "best.ckpt")
            checkpoint_save(state, Path(cfg.checkpoint_dir) / "latest.ckpt")

    # ------------------------------------------------------------------
    # evaluation

    def evaluate_holdout(self, state: TrainState) -> dict[str, float]:
        """Retrieval over the held-out split: ground queries against the
        held-out satellite references (one-to-one truth)."""
        recs = sorted(self.eval_records, key=lambda r: r.id)
        qd = self._encode_view(recs, state.params, GROUND)
        rd = self._encode_view(recs, state.params, SATELLITE)
        store = DescriptorStore(self.cfg.mixer.descriptor_len)
        for rec, row in zip(recs, rd):
            store.add(rec.id, row)
        store.freeze()
        k = min(5, len(recs))
        ranked = search_batch(store, qd, k, query_ids=[r.id for r in recs])
        top1 = sum(rl.entries[0][0] == rl.query_id for rl in ranked) / len(recs)
        topk = sum(
            any(ref == rl.query_id for ref, _ in rl.entries) for rl in ranked
        ) / len(recs)
        return {"top1": top1, f"top{k}": topk}


def train(manifest: Manifest, source: FeatureSource, cfg: TrainConfig) -> TrainState:
    """Full training run per the config; returns the final state (history
    lines included)."""
    return Trainer(manifest, source, cfg).run()


def encode_all(
    manifest: Manifest,
    source: FeatureSource,
    params: MixerParams,
    mixer_cfg: MixerConfig,
) -> tuple[DescriptorStore, DescriptorStore]:
    """One descriptor per record per view (base variant), ordered by id."""
    ground = DescriptorStore(mixer_cfg.descriptor_len)
    satellite = DescriptorStore(mixer_cfg.descriptor_len)
    records = sorted(manifest.records, key=lambda r: r.id)
    chunk = 256
    for lo in range(0, len(records), chunk):
        part = records[lo:lo + chunk]
        g = np.stack([source.tokens(r, GROUND) for r in part])
        s = np.stack([source.tokens(r, SATELLITE) for r in part])
        gd = mixer_forward_batch(g, params, mixer_cfg)
        sd = mixer_forward_batch(s, params, mixer_cfg)
        for rec, grow, srow in zip(part, gd, sd):
            ground.add(rec.id, grow)
            satellite.add(rec.id, srow)
    return ground.freeze(), satellite.freeze()


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_ndarray(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f8").tobytes())


def _read_ndarray(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _must(fh, 1))
    shape = tuple(struct.unpack("<I", _must(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    if count > 1 << 28:
        raise DataError(f"implausible checkpoint array shape {shape}")
    buf = _must(fh, count * 8)
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def _write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (size,) = struct.unpack("<I", _must(fh, 4))
    if size > 1 << 24:
        raise DataError("implausible string size in checkpoint")
    return _must(fh, size).decode("utf-8")


def _must(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise DataError(f"truncated checkpoint: wanted {size} bytes, got {len(buf)}")
    return buf


def checkpoint_save(state: TrainState, path) -> None:
    """Mixer block (CVMX) followed by the trainer block (TRNR): counters,
    temperature, momentum buffers, history, and the in-flight epoch plan."""
    with open(path, "wb") as fh:
        mixer_mod.write_mixer_stream(fh, state.mixer_cfg, state.params)
        fh.write(TRAINER_MAGIC)
        fh.write(struct.pack("<I", TRAINER_VERSION))
        fh.write(struct.pack(
            "<IIQQ", state.epoch, state.epoch_step, state.global_step, state.seed
        ))
        fh.write(struct.pack("<d", state.log_inv_tau))
        if state.velocity is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", len(state.velocity)))
            for arr in state.velocity:
                _write_ndarray(fh, arr)
        fh.write(struct.pack("<?", state.best_top1 is not None))
        fh.write(struct.pack("<dI", state.best_top1 or 0.0, state.best_epoch or 0))
        _write_str(fh, state.config_echo)
        fh.write(struct.pack("<I", len(state.history)))
        for line in state.history:
            _write_str(fh, line)
        fh.write(struct.pack("<?", state.plan is not None))
        if state.plan is not None:
            _write_str(fh, state.plan.phase)
            fh.write(struct.pack("<III", state.plan.batch_size,
                                 len(state.plan.batches), state.plan_cursor))
            for batch in state.plan.batches:
                fh.write(struct.pack("<I", len(batch)))
                for i in batch:
                    fh.write(struct.pack("<Q", i))


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as fh:
        mixer_cfg, params = mixer_mod.read_mixer_stream(fh)
        magic = fh.read(4)
        if magic != TRAINER_MAGIC:
            raise DataError(f"bad trainer block magic {magic!r}")
        (version,) = struct.unpack("<I", _must(fh, 4))
        if version != TRAINER_VERSION:
            raise DataError(f"unsupported trainer checkpoint version {version}")
        epoch, epoch_step, global_step, seed = struct.unpack("<IIQQ", _must(fh, 24))
        (log_inv_tau,) = struct.unpack("<d", _must(fh, 8))
        (n_vel,) = struct.unpack("<I", _must(fh, 4))
        velocity = [_read_ndarray(fh) for _ in range(n_vel)] or None
        (has_best,) = struct.unpack("<?", _must(fh, 1))
        best_top1, best_epoch = struct.unpack("<dI", _must(fh, 12))
        config_echo = _read_str(fh)
        (n_hist,) = struct.unpack("<I", _must(fh, 4))
        history = [_read_str(fh) for _ in range(n_hist)]
        (has_plan,) = struct.unpack("<?", _must(fh, 1))
        plan = None
        plan_cursor = 0
        if has_plan:
            phase = _read_str(fh)
            batch_size, n_batches, plan_cursor = struct.unpack("<III", _must(fh, 12))
            batches = []
            for _ in range(n_batches):
                (blen,) = struct.unpack("<I", _must(fh, 4))
                batches.append([
                    struct.unpack("<Q", _must(fh, 8))[0] for _ in range(blen)
                ])
            plan = EpochPlan(phase=phase, batch_size=batch_size, batches=batches)
        if fh.read(1):
            raise DataError("trailing bytes after checkpoint payload")
    return TrainState(
        mixer_cfg=mixer_cfg,
        params=params,
        velocity=velocity,
        log_inv_tau=log_inv_tau,
        epoch=epoch,
        epoch_step=epoch_step,
        global_step=global_step,
        plan=plan,
        plan_cursor=plan_cursor,
        history=history,
        best_top1=best_top1 if has_best else None,
        best_epoch=best_epoch if has_best else None,
        seed=seed,
        config_echo=config_echo,
    )
