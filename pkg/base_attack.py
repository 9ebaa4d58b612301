import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logit

from core import DataValidationError, NumericError
from shadows import ScoreSet
from trainer import CLAMP_EPS

# --- Logging Setup ---
logger = logging.getLogger('spaudit.attack')


def logit_confidence(p) -> np.ndarray:
    """phi(p) = log(p / (1 - p)) on the clamped true-class probability."""
    return logit(np.clip(np.asarray(p, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS))


@dataclass(frozen=True, eq=False)
class AttackResult:
    """
    Membership scores of one attack against one target; higher means "more
    likely a member". Samples the attack could not score are listed in
    `excluded` and carry no entry.
    """
    target_id: int
    attack: str
    sample_ids: np.ndarray
    scores: np.ndarray
    is_member: np.ndarray
    groups: np.ndarray
    classes: Optional[np.ndarray] = None
    excluded: Tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.sample_ids)
        if not (len(self.scores) == len(self.is_member) == len(self.groups) == n):
            raise DataValidationError(f"attack result for target {self.target_id} has misaligned columns")
        if self.classes is not None and len(self.classes) != n:
            raise DataValidationError(f"attack result for target {self.target_id} has misaligned classes")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError(f"{self.attack} produced non-finite scores for target {self.target_id}")

    def __len__(self) -> int:
        return len(self.sample_ids)


class BaseAttack(ABC):
    """
    Abstract base class for membership inference attacks.
    Subclasses score one target's logit confidences against the shadow models.
    """
    name = "base"
    uses_shadows = True

    @abstractmethod
    def __init__(self, variance_mode: str = "fixed"):
        pass

    @abstractmethod
    def score(self, shadows: ScoreSet, target_phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns (scores, usable) over all samples; `usable` marks samples the
        shadow statistics cover.
        """
        pass

    def attack(self, shadows: Optional[ScoreSet], targets: ScoreSet, row: int) -> AttackResult:
        """Attacks the model in `targets` row `row`."""
        if shadows is not None and not np.array_equal(shadows.sample_ids, targets.sample_ids):
            raise DataValidationError("shadow and target scores cover different samples")
        if self.uses_shadows and (shadows is None or shadows.n_models == 0):
            raise DataValidationError(f"{self.name} needs at least one shadow model")

        target_phi = logit_confidence(targets.confidence[row])
        scores, usable = self.score(shadows, target_phi)
        target_id = int(targets.model_ids[row])
        excluded = tuple(int(s) for s in targets.sample_ids[~usable])
        if excluded:
            logger.warning(f"{self.name}: {len(excluded)} sample(s) lack IN or OUT shadow scores "
                           f"and are excluded for target {target_id}")
        return AttackResult(
            target_id=target_id,
            attack=self.name,
            sample_ids=targets.sample_ids[usable],
            scores=scores[usable],
            is_member=targets.membership[row][usable],
            groups=targets.groups[usable],
            classes=targets.classes[usable],
            excluded=excluded,
        )
