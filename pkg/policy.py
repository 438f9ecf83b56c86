"""
Recurrent actor-critic dispatcher

Encodes a DispatchState into a fixed-size slate, threads a GRU memory across
decisions, scores every (crew, target) pair plus hold/return, and selects a
joint action under the feasibility mask.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from env import TRAVEL_SENTINEL_H, DispatchState, JointAction, RestorationEnv
from errors import ConfigurationError, ContractViolation, ParameterDomainError, SlateOverflowError
from feeder import COMPONENT_CLASSES, HOLD, RETURN, CrewStatus, FeasibilityMask

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

TRAVEL_SCALE_H = 24.0
SHIFT_SCALE_H = 12.0
COORD_SCALE_KM = 20.0
SPEED_SCALE_KMH = 60.0

CREW_STATUSES = tuple(CrewStatus)
TARGET_FEATURES = 9 + len(COMPONENT_CLASSES)
CREW_FEATURES = 7 + len(CREW_STATUSES) + len(COMPONENT_CLASSES)
GLOBAL_FEATURES = 8
PAIR_FEATURES = 2
SPECIAL_CHOICES = 2  # hold, return

MODES = ("sample", "greedy", "temperature")


@dataclass(frozen=True)
class SlateConfig:
    max_targets: int = 32
    max_crews: int = 3
    overflow: str = "error"  # or "top_k"

    def validate(self) -> None:
        if self.max_targets < 1 or self.max_crews < 1:
            raise ConfigurationError("slate sizes must be positive")
        if self.overflow not in ("error", "top_k"):
            raise ConfigurationError(f"unknown slate overflow policy '{self.overflow}'")

    @property
    def n_choices(self) -> int:
        return self.max_targets + SPECIAL_CHOICES


@dataclass(frozen=True)
class PolicyConfig:
    hidden_size: int = 128
    embed_size: int = 64
    nonlinearity: str = "tanh"  # or "identity"
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.hidden_size < 1 or self.embed_size < 1:
            raise ConfigurationError("hidden and embedding sizes must be positive")
        if self.nonlinearity not in ("tanh", "identity"):
            raise ConfigurationError(f"unknown nonlinearity '{self.nonlinearity}'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"unknown dtype '{self.dtype}'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True)
class EncodedState:
    """
    Fixed-shape features for one decision (or a stacked sequence of them)

    Padding rows are zero with their `*_valid` flag False.
    """
    targets: torch.Tensor       # [..., K_c, TARGET_FEATURES]
    target_valid: torch.Tensor  # [..., K_c]
    crews: torch.Tensor         # [..., K_k, CREW_FEATURES]
    crew_valid: torch.Tensor    # [..., K_k]
    pairs: torch.Tensor         # [..., K_k, K_c, PAIR_FEATURES]
    globals: torch.Tensor       # [..., GLOBAL_FEATURES]
    target_ids: Tuple[str, ...] = ()
    crew_ids: Tuple[str, ...] = ()


def _one_hot(value: Any, options: Sequence[Any]) -> List[float]:
    return [1.0 if value == option else 0.0 for option in options]


def encode_state(state: DispatchState, slate: SlateConfig, dtype: torch.dtype = torch.float64) -> EncodedState:
    """Pure function of the state: identical states give identical tensors"""
    slate.validate()
    if len(state.crews) > slate.max_crews:
        raise ContractViolation(f"{len(state.crews)} crews exceed the slate's {slate.max_crews}")

    crew_index = {c.id: k for k, c in enumerate(state.crews)}
    targets = list(state.targets)
    if len(targets) > slate.max_targets:
        if slate.overflow == "error":
            raise SlateOverflowError(f"{len(targets)} confirmed components exceed the slate's {slate.max_targets}")
        logger.debug(f"Slate overflow: keeping the {slate.max_targets} highest-value of {len(targets)} targets")
        keep = sorted(targets, key=lambda t: (-t.value, t.site_id))[:slate.max_targets]
        targets = sorted(keep, key=lambda t: t.site_id)

    max_value = max((t.value for t in targets), default=0.0)
    total_load = max(state.total_load_kw, 1e-9)

    target_rows = np.zeros((slate.max_targets, TARGET_FEATURES))
    target_valid = np.zeros(slate.max_targets, dtype=bool)
    for j, t in enumerate(targets):
        target_rows[j] = [
            1.0,
            1.0,  # confirmed and unrepaired
            float(t.in_repair),
            float(t.assigned_to is not None),
            t.est_repair_h / SHIFT_SCALE_H,
            min(t.min_travel_h, TRAVEL_SCALE_H) / TRAVEL_SCALE_H,
            t.value / max_value if max_value > 0 else 0.0,
            t.restorable_kw / total_load,
            float(t.critical_kw > 0),
        ] + _one_hot(t.component_class, COMPONENT_CLASSES)
        target_valid[j] = True

    crew_rows = np.zeros((slate.max_crews, CREW_FEATURES))
    crew_valid = np.zeros(slate.max_crews, dtype=bool)
    pairs = np.zeros((slate.max_crews, slate.max_targets, PAIR_FEATURES))
    for k, c in enumerate(state.crews):
        crew_rows[k] = [
            1.0,
            float(c.available),
            c.remaining_shift_h / SHIFT_SCALE_H,
            c.x_km / COORD_SCALE_KM,
            c.y_km / COORD_SCALE_KM,
            c.speed_kmh / SPEED_SCALE_KMH,
            float(c.target is not None),
        ] + _one_hot(c.status, CREW_STATUSES) + [1.0 if cls in c.skills else 0.0 for cls in COMPONENT_CLASSES]
        crew_valid[k] = True
        for j, t in enumerate(targets):
            hours = t.travel_h[crew_index[c.id]]
            pairs[k, j, 0] = min(hours, TRAVEL_SCALE_H) / TRAVEL_SCALE_H
            pairs[k, j, 1] = float(hours >= TRAVEL_SENTINEL_H)

    angle = 2.0 * math.pi * state.time_of_day / 24.0
    global_row = np.array([
        math.sin(angle),
        math.cos(angle),
        state.unserved_kw / total_load,
        state.critical_unserved_kw / total_load,
        state.clock / max(state.horizon_h, 1e-9),
        state.rho / 2.0,
        len(targets) / slate.max_targets,
        sum(1 for c in state.crews if c.available) / slate.max_crews,
    ])

    return EncodedState(
        targets=torch.as_tensor(target_rows, dtype=dtype),
        target_valid=torch.as_tensor(target_valid),
        crews=torch.as_tensor(crew_rows, dtype=dtype),
        crew_valid=torch.as_tensor(crew_valid),
        pairs=torch.as_tensor(pairs, dtype=dtype),
        globals=torch.as_tensor(global_row, dtype=dtype),
        target_ids=tuple(t.site_id for t in targets),
        crew_ids=tuple(c.id for c in state.crews),
    )


def stack_encoded(sequence: Sequence[EncodedState]) -> EncodedState:
    """Stack per-step encodings along a new leading time axis"""
    return EncodedState(
        targets=torch.stack([e.targets for e in sequence]),
        target_valid=torch.stack([e.target_valid for e in sequence]),
        crews=torch.stack([e.crews for e in sequence]),
        crew_valid=torch.stack([e.crew_valid for e in sequence]),
        pairs=torch.stack([e.pairs for e in sequence]),
        globals=torch.stack([e.globals for e in sequence]),
    )


def slate_mask(mask: FeasibilityMask, encoded: EncodedState, slate: SlateConfig) -> torch.Tensor:
    """Project a FeasibilityMask onto slate columns [targets..., hold, return]"""
    allowed = torch.zeros((slate.max_crews, slate.n_choices), dtype=torch.bool)
    allowed[:, slate.max_targets] = True
    for k, crew_id in enumerate(encoded.crew_ids):
        row = mask.row(crew_id)
        for j, site_id in enumerate(encoded.target_ids):
            allowed[k, j] = bool(mask.allowed[row, mask.column(site_id)])
        allowed[k, slate.max_targets] = bool(mask.allowed[row, mask.column(HOLD)])
        allowed[k, slate.max_targets + 1] = bool(mask.allowed[row, mask.column(RETURN)])
    return allowed


class RecurrentDispatchPolicy(nn.Module):
    """Shared entity encoders, pooled context, GRU memory, pairwise crew/target scoring"""

    def __init__(self, config: PolicyConfig = PolicyConfig()):
        super().__init__()
        config.validate()
        self.config = config
        embed, hidden = config.embed_size, config.hidden_size
        activation = nn.Tanh if config.nonlinearity == "tanh" else nn.Identity

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.target_encoder = nn.Sequential(
                nn.Linear(TARGET_FEATURES, embed), activation(), nn.Linear(embed, embed), activation()
            )
            self.crew_encoder = nn.Sequential(
                nn.Linear(CREW_FEATURES, embed), activation(), nn.Linear(embed, embed), activation()
            )
            self.global_encoder = nn.Sequential(nn.Linear(GLOBAL_FEATURES, embed), activation())
            self.cell = nn.GRUCell(3 * embed, hidden)
            self.query = nn.Linear(hidden + embed, embed)
            self.key = nn.Linear(embed, embed)
            self.pair_weight = nn.Linear(PAIR_FEATURES, 1, bias=False)
            self.special = nn.Linear(hidden + embed, SPECIAL_CHOICES)
            self.value_head = nn.Linear(hidden, 1)

            for module in self.modules():
                if isinstance(module, nn.Linear):
                    nn.init.orthogonal_(module.weight, gain=1.0)
                    if module.bias is not None:
                        nn.init.zeros_(module.bias)
            nn.init.orthogonal_(self.value_head.weight, gain=0.01)

        self.to(config.torch_dtype)

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def initial_memory(self) -> torch.Tensor:
        return torch.zeros(self.config.hidden_size, dtype=self.config.torch_dtype)

    @staticmethod
    def _masked_mean(embeddings: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        weights = valid.to(embeddings.dtype).unsqueeze(-1)
        return (embeddings * weights).sum(-2) / weights.sum(-2).clamp(min=1.0)

    def forward_sequence(self, encoded: EncodedState, memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Run a whole decision sequence

        Args:
            encoded: stacked encodings with leading time axis T
            memory: hidden state before the first step, shape [hidden]

        Returns:
            logits [T, K_k, K_c + 2], values [T], memories [T, hidden]
        """
        if encoded.targets.dim() != 3 or encoded.targets.shape[-1] != TARGET_FEATURES \
                or encoded.crews.shape[-1] != CREW_FEATURES or encoded.globals.shape[-1] != GLOBAL_FEATURES:
            raise ContractViolation("encoded feature shapes do not match the network")
        if memory.shape != (self.config.hidden_size,):
            raise ContractViolation(f"memory must have shape ({self.config.hidden_size},), got {tuple(memory.shape)}")

        target_emb = self.target_encoder(encoded.targets)
        crew_emb = self.crew_encoder(encoded.crews)
        global_emb = self.global_encoder(encoded.globals)
        context = torch.cat([
            self._masked_mean(target_emb, encoded.target_valid),
            self._masked_mean(crew_emb, encoded.crew_valid),
            global_emb,
        ], dim=-1)

        h = memory.unsqueeze(0)
        memories = []
        for t in range(context.shape[0]):
            h = self.cell(context[t:t + 1], h)
            memories.append(h[0])
        memories = torch.stack(memories)

        crew_input = torch.cat([memories.unsqueeze(1).expand(-1, crew_emb.shape[1], -1), crew_emb], dim=-1)
        queries = self.query(crew_input)
        keys = self.key(target_emb)
        scores = torch.einsum('tke,tce->tkc', queries, keys) / math.sqrt(self.config.embed_size)
        scores = scores + self.pair_weight(encoded.pairs).squeeze(-1)
        logits = torch.cat([scores, self.special(crew_input)], dim=-1)
        values = self.value_head(memories).squeeze(-1)
        return logits, values, memories

    def forward(self, encoded: EncodedState, memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Single decision: (logits [K_k, K_c + 2], value, next memory)"""
        stacked = stack_encoded([encoded])
        logits, values, memories = self.forward_sequence(stacked, memory)
        return logits[0], values[0], memories[0]


def apply_mask(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Blocked entries get the most negative finite value; feasible ones are untouched"""
    if logits.shape != allowed.shape:
        raise ContractViolation(f"mask shape {tuple(allowed.shape)} does not match logits {tuple(logits.shape)}")
    if not bool(allowed.any(dim=-1).all()):
        raise ContractViolation("a crew row has no feasible choice")
    return logits.masked_fill(~allowed, torch.finfo(logits.dtype).min)


@dataclass
class ActionDistribution:
    """Per-crew categorical distributions over masked logits"""
    logits: torch.Tensor
    allowed: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor, allowed: torch.Tensor, temperature: float = 1.0) -> "ActionDistribution":
        if temperature <= 0:
            raise ParameterDomainError(f"temperature must be positive, got {temperature}")
        return cls(apply_mask(logits / temperature, allowed), allowed)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def log_prob(self, choices: torch.Tensor) -> torch.Tensor:
        """Joint log-probability: sum of per-crew terms"""
        return self.log_probs.gather(-1, choices.unsqueeze(-1)).squeeze(-1).sum(-1)

    def entropy(self) -> torch.Tensor:
        """Sum of per-crew entropies; masked entries contribute exactly 0"""
        terms = torch.where(self.allowed, self.probs * self.log_probs, torch.zeros_like(self.logits))
        return -terms.sum(-1).sum(-1)


def select_action(logits: torch.Tensor, allowed: torch.Tensor, mode: str = "greedy",
                  rng: Optional[np.random.Generator] = None, temperature: float = 1.0
                  ) -> Tuple[torch.Tensor, torch.Tensor, float]:
    """
    Pick one choice per crew row, in row order

    A target column chosen by an earlier crew is blocked for later crews.

    Returns:
        (choices [K_k], effective mask [K_k, C], joint log-probability)
    """
    if mode not in MODES:
        raise ParameterDomainError(f"unknown selection mode '{mode}'")
    if mode == "temperature" and temperature <= 0:
        raise ParameterDomainError(f"temperature must be positive, got {temperature}")
    tau = temperature if mode == "temperature" else 1.0
    if mode != "greedy" and rng is None:
        raise ParameterDomainError("sampling modes need a random generator")

    n_targets = logits.shape[-1] - SPECIAL_CHOICES
    effective = allowed.clone()
    choices = []
    with torch.no_grad():
        for k in range(logits.shape[0]):
            row = apply_mask(logits[k:k + 1] / tau, effective[k:k + 1])[0]
            if mode == "greedy":
                choice = int(torch.argmax(row))
            else:
                probs = torch.softmax(row, dim=-1).double().numpy()
                cumulative = np.cumsum(probs)
                choice = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))
                # rounding can push the draw past the last feasible column
                choice = min(choice, int(np.flatnonzero(effective[k].numpy())[-1]))
            choices.append(choice)
            if choice < n_targets:
                effective[k + 1:, choice] = False
    choices = torch.tensor(choices, dtype=torch.long)
    with torch.no_grad():
        log_prob = ActionDistribution.from_logits(logits, effective, tau).log_prob(choices)
    return choices, effective, float(log_prob)


def choices_to_action(choices: torch.Tensor, encoded: EncodedState, state: DispatchState, slate: SlateConfig) -> JointAction:
    assignments = {}
    available = {c.id for c in state.available_crews}
    for k, crew_id in enumerate(encoded.crew_ids):
        if crew_id not in available:
            continue
        column = int(choices[k])
        if column < len(encoded.target_ids):
            assignments[crew_id] = encoded.target_ids[column]
        elif column == slate.max_targets + 1:
            assignments[crew_id] = RETURN
        else:
            assignments[crew_id] = HOLD
    return JointAction(assignments)


@dataclass
class PolicyStep:
    """What one decision leaves behind for training"""
    encoded: EncodedState
    allowed: torch.Tensor
    choices: torch.Tensor
    log_prob: float
    value: float
    memory: torch.Tensor


class PolicyDispatcher:
    """Wraps a policy and its memory as a dispatcher for run_episode"""

    def __init__(self, policy: RecurrentDispatchPolicy, slate: SlateConfig, mode: str = "greedy",
                 temperature: float = 1.0, seed: int = 0, record: bool = False):
        if mode not in MODES:
            raise ParameterDomainError(f"unknown selection mode '{mode}'")
        self.policy = policy
        self.slate = slate
        self.mode = mode
        self.temperature = temperature
        self.seed = seed
        self.record = record
        self.name = "drl"
        self.steps: List[PolicyStep] = []
        self.reset()

    def reset(self) -> None:
        self.memory = self.policy.initial_memory()
        self.rng = np.random.default_rng(self.seed)
        self.steps = []

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: Optional[RestorationEnv] = None) -> JointAction:
        encoded = encode_state(state, self.slate, self.policy.config.torch_dtype)
        allowed = slate_mask(mask, encoded, self.slate)
        with torch.no_grad():
            logits, value, next_memory = self.policy(encoded, self.memory)
        choices, effective, log_prob = select_action(logits, allowed, self.mode, self.rng, self.temperature)
        if self.record:
            self.steps.append(PolicyStep(encoded, effective, choices, log_prob, float(value), self.memory))
        self.memory = next_memory
        return choices_to_action(choices, encoded, state, self.slate)


def save_checkpoint(path, policy: RecurrentDispatchPolicy, slate: SlateConfig, epoch: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'policy_config': asdict(policy.config),
        'slate': asdict(slate),
        'state_dict': policy.state_dict(),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'epoch': int(epoch),
        'extra': extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> Tuple[RecurrentDispatchPolicy, SlateConfig, Dict[str, Any]]:
    payload = torch.load(path, map_location='cpu', weights_only=False)
    if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format_version {payload.get('format_version')!r} in {path}")
    policy = RecurrentDispatchPolicy(PolicyConfig(**payload['policy_config']))
    policy.load_state_dict(payload['state_dict'])
    slate = SlateConfig(**payload['slate'])
    logger.info(f"📦 Loaded checkpoint {path} (epoch {payload.get('epoch', 0)})")
    return policy, slate, payload
