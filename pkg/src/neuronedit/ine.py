"""Interpretable neuron editing: choose which neurons to zero.

Step 1 ranks candidates by corpus-level importance (FFN value, attention
value and FFN query neurons). Step 2 drops those whose dominant position is
the start token. Step 3 masks each survivor alone and keeps the ones that
reduce bias most without costing capability.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attribution import Aggregate, _reports, aggregate_query_neurons, cases_from_pairs, score_cases
from .config import NeuronId
from .datasets import DEFAULT_GENDERS, PairedCase, TaskCase, sample_cases
from .editing import mask_neurons
from .metrics import entropy_difference_eval, task_accuracy
from .parallel import pmap
from .weights import TransformerWeights

log = logging.getLogger(__name__)

PLAN_VERSION = 1


class IneError(RuntimeError):
    def __init__(self, message: str, plan: "EditPlan | None" = None):
        super().__init__(message)
        self.plan = plan


@dataclass
class IneParams:
    n_per_role: int = 50
    budget: int = 50
    capability_drop_threshold: float = 1.0
    bias_sample_size: int = 200
    seed: int = 0
    genders: tuple[str, str] = DEFAULT_GENDERS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["genders"] = list(self.genders)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IneParams":
        d = dict(d)
        if "genders" in d:
            d["genders"] = tuple(d["genders"])
        return cls(**d)


@dataclass
class Candidate:
    neuron: NeuronId
    source: str
    importance: float
    dominant_position: int
    causal_bias_delta: float | None = None
    capability_delta: float | None = None
    filtered: bool = False
    reason: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neuron"] = str(self.neuron)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        d = dict(d)
        d["neuron"] = NeuronId.parse(d["neuron"])
        return cls(**d)


@dataclass
class EditPlan:
    neurons: list[NeuronId]
    candidates: list[Candidate]
    params: IneParams = field(default_factory=IneParams)
    model_hash: str = ""
    baseline: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(set(self.neurons)) != len(self.neurons):
            raise IneError("plan lists a neuron twice")
        seen = [c.neuron for c in self.candidates]
        if len(set(seen)) != len(seen):
            raise IneError("plan has duplicate candidates")
        kept = [c for c in self.candidates if not c.filtered]
        if any(c.dominant_position == 0 for c in kept):
            raise IneError("a start-position neuron survived filtering")
        if len(kept) > self.params.budget:
            raise IneError("more neurons kept than the budget allows")
        if {c.neuron for c in kept} != set(self.neurons):
            raise IneError("selected neurons disagree with candidate provenance")

    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "model_hash": self.model_hash,
            "params": self.params.to_dict(),
            "baseline": self.baseline,
            "neurons": [str(n) for n in self.neurons],
            "candidates": [c.to_dict() for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditPlan":
        if d.get("version") != PLAN_VERSION:
            raise IneError(f"unsupported plan version {d.get('version')!r}")
        plan = cls(
            neurons=[NeuronId.parse(n) for n in d["neurons"]],
            candidates=[Candidate.from_dict(c) for c in d["candidates"]],
            params=IneParams.from_dict(d.get("params", {})),
            model_hash=d.get("model_hash", ""),
            baseline=d.get("baseline", {}),
        )
        plan.validate()
        return plan

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EditPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def identify_candidates(weights: TransformerWeights, tokenizer, commonwords: list[PairedCase], params: IneParams,
                        threads: int | None = 1) -> list[Candidate]:
    """Steps 1 and 2: ranked candidates per role, deduplicated, start-position ones flagged."""
    cases = cases_from_pairs(weights, tokenizer, commonwords, params.genders)
    agg = Aggregate.from_scores(score_cases(weights, cases, threads))
    n = params.n_per_role
    ffn_value = _reports(weights, agg, "ffn", n, n_top=0)
    attn_value = _reports(weights, agg, "attn", n, n_top=0)
    ffn_query = aggregate_query_neurons(weights, agg, attn_value, n, n_top=0)

    best: dict[NeuronId, Candidate] = {}
    for r in ffn_value + attn_value + ffn_query:
        score = r.importance if r.importance is not None else r.query_score
        cand = Candidate(r.id, r.role, score, r.dominant_position)
        if r.id not in best or score > best[r.id].importance:
            best[r.id] = cand
    candidates = [best[k] for k in sorted(best)]
    for c in candidates:
        if c.dominant_position == 0:
            c.filtered, c.reason = True, "start-position"
    return candidates


def ine_select(
    weights: TransformerWeights,
    tokenizer,
    commonwords: list[PairedCase],
    capability_probe: list[TaskCase],
    params: IneParams | None = None,
    threads: int | None = 1,
) -> EditPlan:
    params = params or IneParams()
    if not commonwords or not capability_probe:
        raise ValueError("both the CommonWords pairs and the capability probe must be non-empty")
    candidates = identify_candidates(weights, tokenizer, commonwords, params, threads)
    log.info("step 1-2: %d candidates, %d at the start position", len(candidates), sum(c.filtered for c in candidates))

    sample = sample_cases(commonwords, params.bias_sample_size, params.seed)
    base_bias = entropy_difference_eval(weights, tokenizer, sample, threads).mean_abs_entropy_diff
    base_cap = task_accuracy(weights, tokenizer, capability_probe, threads)

    def ablate(c: Candidate) -> tuple[float, float]:
        edited = mask_neurons(weights, [c.neuron])
        bias = entropy_difference_eval(edited, tokenizer, sample).mean_abs_entropy_diff
        cap = task_accuracy(edited, tokenizer, capability_probe)
        return base_bias - bias, cap - base_cap

    survivors = [c for c in candidates if not c.filtered]
    for c, (db, dc) in zip(survivors, pmap(ablate, survivors, threads)):
        c.causal_bias_delta, c.capability_delta = db, dc
        if -dc > params.capability_drop_threshold:
            c.filtered, c.reason = True, "capability-drop"

    ranked = sorted((c for c in candidates if not c.filtered), key=lambda c: (-c.causal_bias_delta, c.neuron.sort_key()))
    for c in ranked[params.budget:]:
        c.filtered, c.reason = True, "over-budget"
    plan = EditPlan(
        neurons=[c.neuron for c in ranked[: params.budget]],
        candidates=candidates,
        params=params,
        model_hash=weights.hash(),
        baseline={"mean_abs_entropy_diff": base_bias, "capability_accuracy": base_cap, "bias_sample_size": len(sample)},
    )
    if not plan.neurons:
        raise IneError("no candidate survived filtering", plan)
    plan.validate()
    return plan


def apply_plan(weights: TransformerWeights, plan: EditPlan, check_hash: bool = True) -> TransformerWeights:
    if check_hash and plan.model_hash and plan.model_hash != weights.hash():
        raise IneError("plan was built for a different model")
    return mask_neurons(weights, plan.neurons)
