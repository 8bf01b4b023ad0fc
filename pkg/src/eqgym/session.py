"""One discovery session: an agent probes a hidden equation under an
experiment quota and a test quota, submitting hypotheses the platform
judges against the ground truth.

Everything an agent sees or submits lives in display space (masked
names); the session owns the translation back to true names and never
serializes it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import evaluation
from .environment import EnvironmentSpec, PriorMask, LEVELS, render_observation, run_experiment
from .expr import (
    DomainError,
    Expression,
    ExpressionError,
    Value,
    free_variables,
    parse,
    rename_variables,
)

DEFAULT_EXPERIMENTS_QUOTA = 100
DEFAULT_TEST_QUOTA = 5

ACTIVE = "active"
SOLVED = "solved"
EXHAUSTED = "exhausted"
PROTOCOL_FAILURE = "protocol_failure"


class TerminalSession(RuntimeError):
    """submit_turn called on a session that already ended."""


class WireFormatError(ValueError):
    """A wire document does not have the required shape."""


@dataclass(frozen=True)
class ObservationPacket:
    """The full agent-facing state document for one turn."""

    problem_description: str
    controllable_variables: dict[str, str]
    observable_variable: dict[str, str]
    historical_experiments: list[dict]
    quota: dict[str, int]
    last_oracle_result: dict | None = None

    def to_wire(self) -> dict:
        doc = {
            "problem_description": self.problem_description,
            "controllable_variables": dict(self.controllable_variables),
            "observable_variable": dict(self.observable_variable),
            "historical_experiments": [dict(h) for h in self.historical_experiments],
            "quota": dict(self.quota),
        }
        if self.last_oracle_result is not None:
            doc["last_oracle_result"] = dict(self.last_oracle_result)
        return doc

    @classmethod
    def from_wire(cls, data: Mapping) -> "ObservationPacket":
        if not isinstance(data, Mapping):
            raise WireFormatError("packet must be an object")
        for key, kind in (
            ("problem_description", str),
            ("controllable_variables", Mapping),
            ("observable_variable", Mapping),
            ("historical_experiments", list),
            ("quota", Mapping),
        ):
            if key not in data:
                raise WireFormatError(f"packet missing field {key!r}")
            if not isinstance(data[key], kind):
                raise WireFormatError(f"packet field {key!r} has the wrong type")
        quota = data["quota"]
        for key in ("experiments_quota", "test_quota"):
            if key not in quota:
                raise WireFormatError(f"quota missing field {key!r}")
            if not isinstance(quota[key], int) or isinstance(quota[key], bool):
                raise WireFormatError(f"quota field {key!r} must be an integer")
            if quota[key] < 0:
                raise WireFormatError(f"quota field {key!r} must be >= 0")
        oracle = data.get("last_oracle_result")
        if oracle is not None and not isinstance(oracle, Mapping):
            raise WireFormatError("last_oracle_result must be an object")
        return cls(
            problem_description=data["problem_description"],
            controllable_variables=dict(data["controllable_variables"]),
            observable_variable=dict(data["observable_variable"]),
            historical_experiments=[dict(h) for h in data["historical_experiments"]],
            quota=dict(quota),
            last_oracle_result=dict(oracle) if oracle is not None else None,
        )


@dataclass
class ExperimentRecord:
    assignment: dict[str, float]  # display names, declaration order
    value: float | None
    invalid_reason: str | None
    turn_index: int

    def flattened(self, output_name: str) -> dict:
        entry: dict[str, Any] = dict(self.assignment)
        if self.invalid_reason is None:
            entry[output_name] = self.value
        else:
            entry["invalid"] = self.invalid_reason
        return entry


@dataclass
class HypothesisRecord:
    formula: str
    turn_index: int
    parsed: Expression | None
    error: str | None = None
    tested: bool = False
    equivalent: bool | None = None
    method: str | None = None


@dataclass(frozen=True)
class OracleResult:
    formula: str
    equivalent: bool
    method: str
    points_compared: int
    max_rel_error: float | None


@dataclass
class TurnOutcome:
    executed: list[ExperimentRecord]
    dropped: int
    malformed: int
    hypothesis_recorded: bool
    parse_failure: str | None
    oracle: OracleResult | None
    notices: list[str]
    status: str
    turn_index: int


class Session:
    """Mutable state machine for one agent/environment episode."""

    def __init__(
        self,
        env: EnvironmentSpec,
        mask: PriorMask,
        experiments_quota: int = DEFAULT_EXPERIMENTS_QUOTA,
        test_quota: int = DEFAULT_TEST_QUOTA,
        seed: int = 0,
        expose_dummies: bool = False,
        agent_name: str = "",
    ):
        if experiments_quota < 0 or test_quota < 0:
            raise ValueError("quotas must be >= 0")
        self.env = env
        self.mask = mask
        self.expose_dummies = expose_dummies
        self.header = render_observation(env, mask, expose_dummies)
        self.seed = seed
        self.agent_name = agent_name
        self.experiments_quota = experiments_quota
        self.test_quota = test_quota
        self.experiments_remaining = experiments_quota
        self.tests_remaining = test_quota
        self.records: list[ExperimentRecord] = []
        self.hypotheses: list[HypothesisRecord] = []
        self.status = ACTIVE
        self.turn_index = 0
        self.last_oracle: OracleResult | None = None
        self.notices: list[tuple[int, str]] = []
        self.turn_timings: list[float] = []  # in-memory only, never serialized
        self.failure_reason: str | None = None
        # display name -> true name and back
        self._to_true = dict(self.header.name_map)
        self._to_display = {true: disp for disp, true in self._to_true.items()}
        self._output_display = next(iter(self.header.observable_variable))

    # -- agent-facing view ---------------------------------------------------

    def observation_packet(self) -> ObservationPacket:
        return ObservationPacket(
            problem_description=self.header.problem_description,
            controllable_variables=dict(self.header.controllable_variables),
            observable_variable=dict(self.header.observable_variable),
            historical_experiments=[
                r.flattened(self._output_display) for r in self.records
            ],
            quota={
                "experiments_quota": self.experiments_remaining,
                "test_quota": self.tests_remaining,
            },
            last_oracle_result=(
                {
                    "formula": self.last_oracle.formula,
                    "equivalent": self.last_oracle.equivalent,
                }
                if self.last_oracle is not None
                else None
            ),
        )

    # -- turn processing -----------------------------------------------------

    def submit_turn(self, turn) -> TurnOutcome:
        """Process one agent turn: experiments, hypothesis, optional test.

        `turn` needs attributes next_experiments, test_hypothesis_flag and
        current_hypothesis_formula.  Experiments consume quota whether the
        outcome is a value or an invalid result; malformed proposals are
        dropped with a notice and cost nothing.
        """
        if self.status != ACTIVE:
            raise TerminalSession(f"session is {self.status}")
        started = time.perf_counter()
        notices: list[str] = []
        executed: list[ExperimentRecord] = []
        dropped = 0
        malformed = 0

        proposals = list(turn.next_experiments or [])
        for i, proposal in enumerate(proposals):
            if self.experiments_remaining <= 0:
                dropped = len(proposals) - i
                notices.append(
                    f"{dropped} experiment proposal(s) dropped: experiment quota exhausted"
                )
                break
            problem = self._proposal_problem(proposal)
            if problem is not None:
                malformed += 1
                notices.append(f"experiment proposal skipped: {problem}")
                continue
            record = self._run_one(proposal)
            executed.append(record)

        formula = (getattr(turn, "current_hypothesis_formula", "") or "").strip()
        hypothesis: HypothesisRecord | None = None
        parse_failure: str | None = None
        if formula:
            hypothesis = self._record_hypothesis(formula)
            parse_failure = hypothesis.error
            if parse_failure is not None:
                notices.append(f"hypothesis not usable: {parse_failure}")

        oracle: OracleResult | None = None
        if getattr(turn, "test_hypothesis_flag", False):
            if hypothesis is None:
                notices.append("test skipped: no hypothesis submitted this turn")
            elif hypothesis.parsed is None:
                notices.append("test skipped: hypothesis did not parse")
            elif self.tests_remaining <= 0:
                notices.append("test skipped: test quota exhausted")
            else:
                oracle = self._run_oracle(hypothesis)

        if self.status == ACTIVE and self.experiments_remaining == 0 and self.tests_remaining == 0:
            self.status = EXHAUSTED
        for text in notices:
            self.notices.append((self.turn_index, text))
        outcome = TurnOutcome(
            executed=executed,
            dropped=dropped,
            malformed=malformed,
            hypothesis_recorded=hypothesis is not None,
            parse_failure=parse_failure,
            oracle=oracle,
            notices=notices,
            status=self.status,
            turn_index=self.turn_index,
        )
        self.turn_index += 1
        self.turn_timings.append(time.perf_counter() - started)
        return outcome

    def _proposal_problem(self, proposal) -> str | None:
        if not isinstance(proposal, Mapping):
            return "proposal must be an object of variable assignments"
        expected = set(self._to_true)
        got = set(proposal)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            parts = []
            if missing:
                parts.append(f"missing {missing}")
            if extra:
                parts.append(f"unknown {extra}")
            return "bad variable set: " + ", ".join(parts)
        for name, value in proposal.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"value for {name} must be a number"
        return None

    def _run_one(self, proposal: Mapping[str, float]) -> ExperimentRecord:
        display = {name: float(proposal[name]) for name in self._to_true}
        true_assignment = {self._to_true[d]: v for d, v in display.items()}
        outcome = run_experiment(self.env, true_assignment, self.expose_dummies)
        self.experiments_remaining -= 1
        if isinstance(outcome, Value):
            record = ExperimentRecord(display, outcome.value, None, self.turn_index)
        else:
            record = ExperimentRecord(
                display, None, self._display_reason(outcome, display), self.turn_index
            )
        self.records.append(record)
        return record

    def _display_reason(self, err: DomainError, display: Mapping[str, float]) -> str:
        # Reworded in display space: the agent must not learn true names
        # from error messages.
        if err.reason == "out-of-domain":
            name = self._to_display.get(err.subject, err.subject)
            return (
                f"out-of-domain: {name} = {display.get(name)!r} "
                "outside its admissible range"
            )
        if err.reason == "validity":
            for constraint in self.env.validity:
                if constraint.rendered() == err.subject:
                    shown = constraint.rendered(self._to_display)
                    return f"validity: constraint {shown} violated"
            return "validity: constraint violated"
        if err.detail:
            return f"{err.reason}: {err.detail}"
        return err.reason

    def _record_hypothesis(self, formula: str) -> HypothesisRecord:
        record = HypothesisRecord(formula, self.turn_index, None)
        try:
            parsed = parse(formula)
        except ExpressionError as exc:
            record.error = str(exc)
        else:
            unknown = free_variables(parsed) - set(self._to_true)
            if unknown:
                record.error = f"unknown identifiers: {', '.join(sorted(unknown))}"
            else:
                record.parsed = parsed
        self.hypotheses.append(record)
        return record

    def _run_oracle(self, hypothesis: HypothesisRecord) -> OracleResult:
        self.tests_remaining -= 1
        true_expr = rename_variables(hypothesis.parsed, self._to_true)
        extra = (
            {v.name: v.domain for v in self.env.dummies}
            if self.expose_dummies
            else None
        )
        verdict = evaluation.oracle_test(
            self.env, true_expr, seed=self.seed, extra_domains=extra
        )
        oracle = OracleResult(
            formula=hypothesis.formula,
            equivalent=verdict.equivalent,
            method=verdict.method,
            points_compared=verdict.points_compared,
            max_rel_error=verdict.max_rel_error,
        )
        hypothesis.tested = True
        hypothesis.equivalent = verdict.equivalent
        hypothesis.method = verdict.method
        self.last_oracle = oracle
        if verdict.equivalent:
            self.status = SOLVED
        return oracle

    # -- termination ----------------------------------------------------------

    def finish(self) -> None:
        """Force an active session to end as exhausted (runner policy for
        agents that stop making progress)."""
        if self.status == ACTIVE:
            self.status = EXHAUSTED

    def fail(self, reason: str) -> None:
        if self.status == ACTIVE:
            self.status = PROTOCOL_FAILURE
            self.failure_reason = reason

    # -- persistence ----------------------------------------------------------

    def transcript(self) -> dict:
        """Serializable session record, display space only.

        Deliberately excludes the name map and any timing, so the same
        session replays byte-identically and leaks no hidden priors.
        """
        return {
            "kind": "transcript",
            "env_id": self.env.env_id,
            "agent": self.agent_name,
            "level": self.mask.level_label() or "custom",
            "mask": {
                "show_context": self.mask.show_context,
                "show_names": self.mask.show_names,
                "show_descriptions": self.mask.show_descriptions,
            },
            "expose_dummies": self.expose_dummies,
            "seed": self.seed,
            "quota": {
                "experiments_quota": self.experiments_quota,
                "test_quota": self.test_quota,
            },
            "status": self.status,
            "solved": self.status == SOLVED,
            "turn_count": self.turn_index,
            "experiments_used": len(self.records),
            "tests_used": self.test_quota - self.tests_remaining,
            "experiments": [
                r.flattened(self._output_display) for r in self.records
            ],
            "hypotheses": [
                {
                    "formula": h.formula,
                    "turn": h.turn_index,
                    "parsed": h.parsed is not None,
                    "error": h.error,
                    "tested": h.tested,
                    "equivalent": h.equivalent,
                    "method": h.method,
                }
                for h in self.hypotheses
            ],
            "notices": [[turn, text] for turn, text in self.notices],
            "failure_reason": self.failure_reason,
        }


def new_session(
    env: EnvironmentSpec,
    mask: PriorMask | str = "L1",
    experiments_quota: int = DEFAULT_EXPERIMENTS_QUOTA,
    test_quota: int = DEFAULT_TEST_QUOTA,
    seed: int = 0,
    expose_dummies: bool = False,
    agent_name: str = "",
) -> Session:
    """Create a session; `mask` may be a PriorMask or a level label."""
    if isinstance(mask, str):
        try:
            mask = LEVELS[mask]
        except KeyError:
            raise ValueError(f"unknown prior level {mask!r}") from None
    return Session(
        env,
        mask,
        experiments_quota=experiments_quota,
        test_quota=test_quota,
        seed=seed,
        expose_dummies=expose_dummies,
        agent_name=agent_name,
    )
