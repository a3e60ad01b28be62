"""
alpha_search.py - Grid search for the per-site sparsity coefficients
Sweeps (alpha1, alpha3); alpha2 and alpha4 follow from the constraint system.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from constants import ALPHA_RANGE_HIGH, ALPHA_RANGE_LOW, ALPHA_STEP, GRID_BOUND_SLACK, MAX_WORKERS
from errors import InfeasibleCoefficientsError, RejectedInputError
from rotation_engine import RotatedModel
from sparsifier import SparsityPlan, solve_alpha_constraints
from toy_transformer import Mode, Model, forward_sequences, sequence_output_error

logger = logging.getLogger(__name__)


class Objective(str, Enum):
    RELATIVE_LOGIT_ERROR = "relative_logit_error"


class SearchSpace(BaseModel):
    alpha1_range: Tuple[float, float] = (ALPHA_RANGE_LOW, ALPHA_RANGE_HIGH)
    alpha3_range: Tuple[float, float] = (ALPHA_RANGE_LOW, ALPHA_RANGE_HIGH)
    step: float = Field(default=ALPHA_STEP, gt=0.0)
    objective: Objective = Objective.RELATIVE_LOGIT_ERROR

    @model_validator(mode="after")
    def check_ranges(self) -> "SearchSpace":
        for name, (low, high) in (("alpha1", self.alpha1_range), ("alpha3", self.alpha3_range)):
            if low <= 0.0 or high < low:
                raise ValueError(f"{name} range must satisfy 0 < low <= high, got ({low}, {high})")
        return self

    def axis(self, bounds: Tuple[float, float]) -> List[float]:
        """low + i*step for integral i, inclusive of high within a small slack"""
        low, high = bounds
        values, i = [], 0
        while low + i * self.step <= high + GRID_BOUND_SLACK:
            values.append(round(low + i * self.step, 10))
            i += 1
        return values

    def points(self) -> List[Tuple[Tuple[int, int], float, float]]:
        a1_axis, a3_axis = self.axis(self.alpha1_range), self.axis(self.alpha3_range)
        return [((i, j), a1, a3)
                for (i, a1), (j, a3) in itertools.product(enumerate(a1_axis), enumerate(a3_axis))]


@dataclass
class TrialResult:
    index: Tuple[int, int]
    alpha: Tuple[float, float, float, float]
    objective: float


@dataclass
class SearchResult:
    alpha: Tuple[float, float, float, float]
    objective: float
    trace: List[TrialResult] = field(default_factory=list)
    skipped: List[Tuple[float, float]] = field(default_factory=list)

    def to_records(self) -> List[Dict]:
        return [{"alpha1": t.alpha[0], "alpha2": t.alpha[1], "alpha3": t.alpha[2],
                 "alpha4": t.alpha[3], "objective": t.objective} for t in self.trace]


def evaluate_plan(rotated: RotatedModel, eval_seqs: Sequence[np.ndarray],
                  dense_logits: Sequence[np.ndarray], plan: SparsityPlan, max_workers: int = 1) -> float:
    """Mean per-token relative logit error of the rotated Top-K model against dense logits"""
    logits = forward_sequences(rotated.model, eval_seqs, Mode.LAROSA, plan=plan,
                               adapters=rotated.adapters, max_workers=max_workers)
    return sequence_output_error(logits, dense_logits)["mean"]


def grid_search(model: Model, rotated: RotatedModel, eval_seqs: Sequence[np.ndarray], p: float,
                space: SearchSpace = SearchSpace(), max_workers: int = MAX_WORKERS) -> SearchResult:
    """
    Exhaustive sweep of the coefficient grid; one alpha shared by every layer.
    The best point minimizes the objective, ties going to the smallest (alpha1, alpha3).
    """
    if not (0.0 < p < 1.0):
        raise RejectedInputError(f"grid search needs 0 < p < 1, got {p}")
    if len(eval_seqs) == 0:
        raise RejectedInputError("grid search needs a non-empty evaluation set")
    m = model.config.m
    dense_logits = forward_sequences(model, eval_seqs)

    feasible, skipped = [], []
    for index, a1, a3 in space.points():
        try:
            a2, a4 = solve_alpha_constraints(a1, a3, m)
        except InfeasibleCoefficientsError as e:
            logger.warning(f"Skipping grid point alpha1={a1}, alpha3={a3}: {e}")
            skipped.append((a1, a3))
            continue
        feasible.append((index, (a1, a2, a3, a4)))
    logger.info(f"Grid search: {len(feasible)} feasible points of {len(feasible) + len(skipped)}, p={p}")

    def run(point) -> TrialResult:
        index, alpha = point
        plan = SparsityPlan(p=p, alpha=alpha, m=m)
        objective = evaluate_plan(rotated, eval_seqs, dense_logits, plan)
        logger.debug(f"alpha={alpha}: objective={objective:.6f}")
        return TrialResult(index, alpha, objective)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        trace = list(executor.map(run, feasible))
    if not trace:
        raise InfeasibleCoefficientsError("no feasible grid point", skipped=len(skipped))

    best = min(trace, key=lambda t: (t.objective, t.index))
    logger.info(f"Best alpha={best.alpha} with objective {best.objective:.6f}")
    return SearchResult(best.alpha, best.objective, trace, skipped)
