"""Block-wise autoregressive rollout engine with pluggable cache strategies.

Each step projects per-head Q/K/V from the block's hidden state, asks the
strategy for every head's retained history, temporally encodes the assembled
context (contiguous re-indexing for the head-wise strategy, global frame
indices for the baselines), packs all heads of a layer into one flat buffer,
and runs packed attention. Caches advance only at commit time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .assembly import (
    AssembledSequence,
    assemble,
    encode_queries,
    encode_temporal,
    pack,
    packed_attention,
    reencode_temporal,
)
from .cache import FrameKV, RoleCache, make_cache, retained_frames, roll_after_block
from .episodic import AdmissionDecision, EpisodicMemory, Slots
from .errors import ConfigError
from .model import ModelConfig, ModelWeights, block_input
from .roles import HeadRole, HeadRoleMap
from .tensor_ops import RopeParams, SPATIAL_AXES, apply_rope, grid_positions


@dataclass
class LayerRecord:
    """One layer's per-head projections for a finished block: spatially
    encoded queries and the f per-head FrameKV destined for the caches."""

    layer: int
    q_spatial: list[np.ndarray]          # per head, (f*s, d)
    frames: list[list[FrameKV]]          # per head, f frames


@dataclass
class LatentBlock:
    """One generated block: f frames of final latents plus the per-layer
    Q/K/V records retained for cache writes and profiling."""

    index: int
    frames: list[np.ndarray]             # f arrays of (s, d_model)
    layer_records: list[LayerRecord]

    def hidden(self) -> np.ndarray:
        return np.vstack(self.frames)


@dataclass
class RetentionSnapshot:
    """Per-head evidence for the masked-attention oracle at one step."""

    provenance: np.ndarray               # (tokens, 2) source (frame, token)
    key_token_temporal: np.ndarray       # (tokens,)
    query_frame_indices: np.ndarray      # (f,)
    output: np.ndarray                   # (f*s, d)


class CacheStrategy(Protocol):
    name: str

    def history_frames(self, layer: int, head: int) -> list[FrameKV]: ...

    def uses_reencoding(self) -> bool: ...

    def roll(self, block: LatentBlock, prompt: str) -> Optional[AdmissionDecision]: ...


class UnboundedStrategy:
    """Keep every frame for every head; temporal indices stay global."""

    name = "unbounded"

    def __init__(self, config: ModelConfig):
        self.config = config
        self._frames: dict[tuple[int, int], list[FrameKV]] = {lh: [] for lh in config.heads}

    def history_frames(self, layer: int, head: int) -> list[FrameKV]:
        return list(self._frames[(layer, head)])

    def uses_reencoding(self) -> bool:
        return False

    def roll(self, block: LatentBlock, prompt: str) -> None:
        for rec in block.layer_records:
            for h, frames in enumerate(rec.frames):
                self._frames[(rec.layer, h)].extend(frames)
        return None


class WindowStrategy:
    """Uniform sliding window, optionally with leading sink frames.

    The window counts the current block: each head attends the first n_sink
    frames plus the most recent `window` frames of the full sequence
    (deduplicated), so the steady-state budget is n_sink + window frames.
    """

    def __init__(self, config: ModelConfig, window: int, n_sink: int = 0):
        if window < config.f:
            raise ConfigError(f"window must be >= f ({config.f}), got {window}")
        if n_sink < 0:
            raise ConfigError("n_sink must be >= 0")
        self.config = config
        self.window = window
        self.n_sink = n_sink
        self.name = f"sink_window(W={window}, n_sink={n_sink})" if n_sink else f"uniform_window(W={window})"
        self._f = config.f
        self._sink: dict[tuple[int, int], list[FrameKV]] = {lh: [] for lh in config.heads}
        self._recent: dict[tuple[int, int], list[FrameKV]] = {lh: [] for lh in config.heads}

    def history_frames(self, layer: int, head: int) -> list[FrameKV]:
        sink = self._sink[(layer, head)]
        # current block consumes f of the window's slots
        keep = max(self.window - self._f, 0)
        recent = self._recent[(layer, head)][-keep:] if keep else []
        seen = {fr.global_frame_index for fr in sink}
        return sink + [fr for fr in recent if fr.global_frame_index not in seen]

    def uses_reencoding(self) -> bool:
        return False

    def roll(self, block: LatentBlock, prompt: str) -> None:
        for rec in block.layer_records:
            for h, frames in enumerate(rec.frames):
                lh = (rec.layer, h)
                for fr in frames:
                    if len(self._sink[lh]) < self.n_sink:
                        self._sink[lh].append(fr)
                self._recent[lh].extend(frames)
                keep = max(self.window - self._f, 0)
                del self._recent[lh][:-keep or len(self._recent[lh])]
        return None


@dataclass
class HeadWiseHyper:
    b_epi: int = 5
    b_fast: int = 3
    tau_novel: float = 0.95
    update_interval: int = 3
    candidate_mode: str = "latest"      # or "all": evaluate every exited block
    novelty_metric: str = "key_cosine"  # or "latent"

    def __post_init__(self) -> None:
        if min(self.b_epi, self.b_fast, self.update_interval) < 1:
            raise ConfigError("B_epi, B_fast, update_interval must be >= 1")
        if self.candidate_mode not in ("latest", "all"):
            raise ConfigError(f"unknown candidate_mode {self.candidate_mode!r}")


@dataclass
class _Candidate:
    frame_index: int
    slots: Slots
    latent: Optional[np.ndarray]


class HeadWiseStrategy:
    """Role-tailored caches: local pruning, anchor retention, and a
    hierarchical fast + episodic memory for memory heads, with contiguous
    per-head temporal re-indexing at assembly time."""

    name = "head_wise"

    def __init__(self, config: ModelConfig, weights: ModelWeights,
                 role_map: HeadRoleMap, hyper: HeadWiseHyper | None = None):
        if role_map.layers != config.L or role_map.heads != config.H:
            raise ConfigError(
                f"role map covers {role_map.layers}x{role_map.heads} heads but model is {config.L}x{config.H}"
            )
        self.config = config
        self.weights = weights
        self.role_map = role_map
        self.hyper = hyper or HeadWiseHyper()
        memory_heads = role_map.heads_of(HeadRole.MEMORY)
        if not memory_heads:
            raise ConfigError("head-wise strategy needs at least one memory head")
        self.episodic = EpisodicMemory(
            capacity=self.hyper.b_epi,
            memory_heads=memory_heads,
            tokens_per_frame=config.s,
            novelty_metric=self.hyper.novelty_metric,
        )
        self.caches: dict[tuple[int, int], RoleCache] = {
            (l, h): make_cache(role_map.role(l, h), l, h, config.f, self.hyper.b_fast, self.episodic)
            for (l, h) in config.heads
        }
        self._pending: list[_Candidate] = []
        self._prompt_keys: Slots = {}
        self._active_prompt: Optional[str] = None
        # raw frame latents, archived only when the latent novelty metric is on
        self._latents: dict[int, np.ndarray] = {}

    def history_frames(self, layer: int, head: int) -> list[FrameKV]:
        return retained_frames(self.role_map.role(layer, head), self.caches[(layer, head)], [])

    def uses_reencoding(self) -> bool:
        return True

    def _refresh_prompt_keys(self, prompt: str) -> None:
        if prompt == self._active_prompt:
            return
        self._prompt_keys = {
            (l, h): self.weights.prompt_key_vector(prompt, l, h)
            for (l, h) in self.episodic.memory_heads
        }
        self._active_prompt = prompt

    def roll(self, block: LatentBlock, prompt: str) -> Optional[AdmissionDecision]:
        self._refresh_prompt_keys(prompt)
        f = self.config.f
        evicted_by_slot: dict[tuple[int, int], list[FrameKV]] = {}
        for rec in block.layer_records:
            for h, frames in enumerate(rec.frames):
                lh = (rec.layer, h)
                role = self.role_map.role(*lh)
                evicted = roll_after_block(role, self.caches[lh], block.index, frames)
                if evicted:
                    evicted_by_slot[lh] = evicted

        # Candidacy fires when a block's first frame leaves fast memory; at
        # most one such frame per roll since evictions are consecutive.
        if evicted_by_slot:
            any_slot = next(iter(evicted_by_slot.values()))
            first_frames = [fr.global_frame_index for fr in any_slot if fr.global_frame_index % f == 0]
            for fidx in first_frames:
                slots = {
                    lh: next(fr for fr in evicted if fr.global_frame_index == fidx)
                    for lh, evicted in evicted_by_slot.items()
                }
                cand = _Candidate(frame_index=fidx, slots=slots, latent=self._candidate_latent(fidx))
                if self.hyper.candidate_mode == "latest":
                    self._pending = [cand]
                else:
                    self._pending.append(cand)

        decision: Optional[AdmissionDecision] = None
        if block.index % self.hyper.update_interval == 0 and self._pending:
            for cand in self._pending:
                decision = self.episodic.try_admit(
                    candidate=cand.slots,
                    frame_index=cand.frame_index,
                    block_index=block.index,
                    tau_novel=self.hyper.tau_novel,
                    prompt_keys=self._prompt_keys,
                    latent=cand.latent,
                )
            self._pending = []
        return decision

    def _candidate_latent(self, frame_index: int) -> Optional[np.ndarray]:
        if self.hyper.novelty_metric != "latent":
            return None
        return self._latents.get(frame_index)

    def archive_latents(self, block: LatentBlock) -> None:
        if self.hyper.novelty_metric != "latent":
            return
        f = self.config.f
        for k, frame in enumerate(block.frames):
            self._latents[f * (block.index - 1) + k] = frame


@dataclass
class MetricsRow:
    block_index: int
    fidelity: Optional[float]
    stored_scalar_count: int
    frame_slots_live: int
    wall_time_ms: float
    active_prompt: str


@dataclass
class RolloutRecord:
    strategy: str
    blocks: list[LatentBlock]
    metrics: list[MetricsRow]
    admissions: list[AdmissionDecision]
    retention: list[dict[tuple[int, int], RetentionSnapshot]] = field(default_factory=list)


class RolloutEngine:
    def __init__(self, weights: ModelWeights, config: ModelConfig, rope: RopeParams,
                 strategy: CacheStrategy, keep_records: bool = False,
                 record_retention: bool = False):
        if rope.d != config.d:
            raise ConfigError(f"rope channel total {rope.d} != head dim {config.d}")
        if getattr(strategy, "config", config) != config:
            raise ConfigError("cache strategy was built for a different model config")
        self.weights = weights
        self.config = config
        self.rope = rope
        self.strategy = strategy
        self.keep_records = keep_records
        self.record_retention = record_retention
        frame_grid = grid_positions(config.grid_h, config.grid_w)
        self._spatial_pos2 = frame_grid[:, 1:].copy()              # (s, 2)
        block_pos = np.tile(frame_grid, (config.f, 1))
        self._block_positions = block_pos                          # (f*s, 3), t column unused here
        self._last_step_slots = 0
        self._last_step_scalars = 0
        self._last_retention: dict[tuple[int, int], RetentionSnapshot] = {}

    def step(self, i: int, prompt: str, perturb: np.ndarray | None = None) -> LatentBlock:
        """Generate block i against the current cache state without mutating
        it. Deterministic given (seed, prompt schedule, i, perturb)."""
        cfg = self.config
        f, s = cfg.f, cfg.s
        hidden = block_input(self.weights, prompt, i, perturb=perturb)
        base_frame = f * (i - 1)
        global_q_idx = np.arange(base_frame, base_frame + f, dtype=np.int64)
        records: list[LayerRecord] = []
        step_slots = 0
        step_scalars = 0
        retention: dict[tuple[int, int], RetentionSnapshot] = {}

        for l in range(cfg.L):
            q_sp: list[np.ndarray] = []
            frames_per_head: list[list[FrameKV]] = []
            encoded = []
            queries = []
            seqs: list[AssembledSequence] = []
            for h in range(cfg.H):
                q = hidden @ self.weights.wq[l, h]
                k = hidden @ self.weights.wk[l, h]
                v = hidden @ self.weights.wv[l, h]
                q = apply_rope(q, self._positions_for_block(global_q_idx), self.rope, axes=SPATIAL_AXES)
                k = apply_rope(k, self._positions_for_block(global_q_idx), self.rope, axes=SPATIAL_AXES)
                current = [
                    FrameKV(keys=k[t * s:(t + 1) * s], values=v[t * s:(t + 1) * s],
                            spatial_positions=self._spatial_pos2,
                            global_frame_index=int(global_q_idx[t]))
                    for t in range(f)
                ]
                history = self.strategy.history_frames(l, h)
                seq = assemble(l, h, history, current)
                if self.strategy.uses_reencoding():
                    enc = reencode_temporal(seq, self.rope)
                else:
                    key_idx = np.array([fr.global_frame_index for fr in seq.frames], dtype=np.int64)
                    enc = encode_temporal(seq, self.rope, key_idx, global_q_idx)
                q_enc = encode_queries(q, enc.query_frame_indices, s, self.rope)
                q_sp.append(q)
                frames_per_head.append(current)
                encoded.append(enc)
                queries.append(q_enc)
                seqs.append(seq)

            buffer = pack(encoded, queries)
            outputs = packed_attention(buffer)
            step_slots += sum(seq.frame_count for seq in seqs)
            step_scalars += buffer.keys.size + buffer.values.size
            delta = np.zeros_like(hidden)
            for h in range(cfg.H):
                delta += outputs[h] @ self.weights.wo[l, h]
            hidden = hidden + delta
            records.append(LayerRecord(layer=l, q_spatial=q_sp, frames=frames_per_head))
            if self.record_retention:
                for h in range(cfg.H):
                    retention[(l, h)] = RetentionSnapshot(
                        provenance=seqs[h].provenance(),
                        key_token_temporal=encoded[h].key_token_temporal,
                        query_frame_indices=encoded[h].query_frame_indices,
                        output=outputs[h],
                    )

        self._last_step_slots = step_slots
        self._last_step_scalars = step_scalars
        self._last_retention = retention
        frames = [hidden[t * s:(t + 1) * s].copy() for t in range(f)]
        return LatentBlock(index=i, frames=frames, layer_records=records)

    def _positions_for_block(self, frame_indices: np.ndarray) -> np.ndarray:
        pos = self._block_positions.copy()
        pos[:, 0] = np.repeat(frame_indices, self.config.s)
        return pos

    def commit(self, block: LatentBlock, prompt: str) -> Optional[AdmissionDecision]:
        if isinstance(self.strategy, HeadWiseStrategy):
            self.strategy.archive_latents(block)
        return self.strategy.roll(block, prompt)

    def run(self, n_blocks: int, schedule: list[tuple[str, int]],
            observer=None) -> RolloutRecord:
        """Full rollout. `schedule` is [(prompt, start_block), ...] with the
        first entry starting at block 1. `observer(engine, block, prompt)` is
        called after each step, before commit."""
        prompts = _expand_schedule(schedule, n_blocks)
        record = RolloutRecord(strategy=self.strategy.name, blocks=[], metrics=[], admissions=[])
        for i in range(1, n_blocks + 1):
            prompt = prompts[i - 1]
            t0 = time.perf_counter()
            block = self.step(i, prompt)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            if observer is not None:
                observer(self, block, prompt)
            decision = self.commit(block, prompt)
            if decision is not None:
                record.admissions.append(decision)
            record.metrics.append(MetricsRow(
                block_index=i, fidelity=None,
                stored_scalar_count=self._last_step_scalars,
                frame_slots_live=self._last_step_slots,
                wall_time_ms=wall_ms, active_prompt=prompt,
            ))
            if self.record_retention:
                record.retention.append(self._last_retention)
            if self.keep_records:
                record.blocks.append(block)
            else:
                record.blocks.append(LatentBlock(index=i, frames=block.frames, layer_records=[]))
        return record


def _expand_schedule(schedule: list[tuple[str, int]], n_blocks: int) -> list[str]:
    if not schedule:
        raise ConfigError("prompt schedule must not be empty")
    ordered = sorted(schedule, key=lambda ps: ps[1])
    if ordered[0][1] != 1:
        raise ConfigError("prompt schedule must start at block 1")
    starts = [st for _, st in ordered]
    if len(set(starts)) != len(starts):
        raise ConfigError("prompt schedule has duplicate start blocks")
    prompts = []
    for i in range(1, n_blocks + 1):
        active = ordered[0][0]
        for text, start in ordered:
            if start <= i:
                active = text
        prompts.append(active)
    return prompts


def generate_rollout(weights: ModelWeights, config: ModelConfig, rope: RopeParams,
                     strategy: CacheStrategy, schedule: list[tuple[str, int]],
                     n_blocks: int, keep_records: bool = False,
                     record_retention: bool = False) -> RolloutRecord:
    if n_blocks < 1:
        raise ConfigError("n_blocks must be >= 1")
    engine = RolloutEngine(weights, config, rope, strategy,
                           keep_records=keep_records, record_retention=record_retention)
    return engine.run(n_blocks, schedule)
