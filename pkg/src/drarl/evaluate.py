"""Evaluation harness: identification accuracy and closed-loop policy trials.

Identification metrics compare traced reason windows against the scripted
ground truth stored in case metadata.  Policy metrics rebuild each case's
world from its family, seed and accepted attempt, drive it closed loop with
the deterministic policy, and classify the outcome as passed, collision or
stuck; running out the horizon counts as stuck since it is the signature of
an over-conservative driver.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .agent import Policy, run_world_episode
from .core import DisengagementCase, ReasonSet
from .ood import ReasonConfig, proximity_uids, trace_reason
from .predictor import PredictorModel
from .scenarios import ScenarioSpec, build_world, gen_scenario

OUTCOMES = ("passed", "collision", "stuck")


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# identification


@dataclass
class OnsetStats:
    """Window accuracy against scripted anomalies."""

    n: int = 0
    uid_hits: int = 0          # true object is in the reason set
    onset_hits: int = 0        # ...and its window starts within tolerance
    exact_sets: int = 0        # reason set is exactly the true object
    onset_errors: list = field(default_factory=list)

    @property
    def onset_rate(self) -> float:
        return self.onset_hits / self.n if self.n else 0.0

    @property
    def exact_rate(self) -> float:
        return self.exact_sets / self.n if self.n else 0.0


def onset_accuracy(
    cases: list[DisengagementCase],
    model: PredictorModel,
    config: ReasonConfig,
    tolerance: int = 2,
) -> OnsetStats:
    stats = OnsetStats()
    for case in cases:
        truth = case.meta.get("truth", {})
        true_uid = truth.get("uid")
        true_onset = truth.get("onset")
        if true_uid is None or true_onset is None:
            raise EvalError("case lacks scripted anomaly ground truth")
        trace = trace_reason(case, model, config)
        stats.n += 1
        found = {el.uid: el for el in trace.reason.elements}
        if true_uid in found:
            stats.uid_hits += 1
            err = found[true_uid].start_frame - true_onset
            stats.onset_errors.append(err)
            if abs(err) <= tolerance:
                stats.onset_hits += 1
        if set(found) == {true_uid}:
            stats.exact_sets += 1
    return stats


@dataclass
class EmptyStats:
    """Fraction of cases correctly identified as having no reason."""

    n: int = 0
    empty_unfiltered: int = 0
    empty_filtered: int = 0

    @property
    def unfiltered_rate(self) -> float:
        return self.empty_unfiltered / self.n if self.n else 0.0

    @property
    def filtered_rate(self) -> float:
        return self.empty_filtered / self.n if self.n else 0.0


def empty_reason_rate(
    cases: list[DisengagementCase],
    model: PredictorModel,
    config: ReasonConfig,
) -> EmptyStats:
    """One unfiltered scan per case; the filtered number drops any reason
    whose object never comes within the proximity radius."""
    unfiltered = replace(config, proximity_filter=False)
    stats = EmptyStats()
    for case in cases:
        trace = trace_reason(case, model, unfiltered)
        near = set(proximity_uids(case, config.proximity_radius))
        stats.n += 1
        if trace.reason.empty:
            stats.empty_unfiltered += 1
        if not any(el.uid in near for el in trace.reason.elements):
            stats.empty_filtered += 1
    return stats


def identify_cases(
    cases: list[DisengagementCase],
    model: PredictorModel,
    config: ReasonConfig,
) -> list[ReasonSet]:
    return [trace_reason(case, model, config).reason for case in cases]


# ---------------------------------------------------------------------------
# closed-loop policy evaluation


@dataclass
class PolicyEvalResult:
    counts: dict = field(default_factory=lambda: {k: 0 for k in OUTCOMES})

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def rate(self, outcome: str) -> float:
        if outcome not in OUTCOMES:
            raise EvalError(f"unknown outcome {outcome!r}")
        return self.counts[outcome] / self.n if self.n else 0.0

    @property
    def pass_rate(self) -> float:
        return self.rate("passed")

    @property
    def collision_rate(self) -> float:
        return self.rate("collision")

    @property
    def stuck_rate(self) -> float:
        return self.rate("stuck")


def _classify(raw_outcome: str) -> str:
    return "stuck" if raw_outcome == "timeout" else raw_outcome


def eval_spec(policy: Policy, spec: ScenarioSpec, attempt: int = 0) -> str:
    built = build_world(spec, attempt)
    outcome, _, _ = run_world_episode(policy, built)
    return _classify(outcome)


def eval_policy_on_cases(policy: Policy, cases: list[DisengagementCase]) -> PolicyEvalResult:
    """Drive the recorded worlds closed loop and tally outcomes."""
    result = PolicyEvalResult()
    for case in cases:
        spec = ScenarioSpec(case.meta["family"], case.meta["seed"])
        outcome = eval_spec(policy, spec, case.meta.get("attempt", 0))
        result.counts[outcome] += 1
    return result


def eval_policy_perturbed(policy: Policy, family: str, seeds) -> PolicyEvalResult:
    """Benign-lookalike suite: same families, anomaly replaced by a nuisance."""
    result = PolicyEvalResult()
    for seed in seeds:
        outcome = eval_spec(policy, ScenarioSpec(family, int(seed), perturbed=True))
        result.counts[outcome] += 1
    return result


def make_case_suite(family: str, seeds) -> list[DisengagementCase]:
    return [gen_scenario(ScenarioSpec(family, int(s))) for s in seeds]
