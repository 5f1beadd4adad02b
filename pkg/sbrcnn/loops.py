"""
Loop schedules: per-loop IoU thresholds, loss weights and head-pair alternation
"""
from typing import List

from sbrcnn.exceptions import InvalidInputError

MAX_LOOPS = 5

_THRESHOLDS = {
    1: [0.5],
    2: [0.5, 0.7],
    3: [0.5, 0.6, 0.7],
    4: [0.5, 0.6, 0.7, 0.8],
    5: [0.5, 0.6, 0.7, 0.8, 0.9],
}

_LOSS_WEIGHTS = [1.0, 0.5, 0.25, 0.125, 0.0625]


def threshold_schedule(train_loops: int) -> List[float]:
    """
    Positive-IoU threshold u^t for every training loop

    Args:
        train_loops: Number of training loops L_t, between 1 and 5

    Returns:
        Strictly increasing thresholds inside [0.5, 0.9]
    """
    if train_loops not in _THRESHOLDS:
        raise InvalidInputError(f"train_loops must be in 1..{MAX_LOOPS}, got {train_loops}")
    return list(_THRESHOLDS[train_loops])


def default_loss_weights(train_loops: int) -> List[float]:
    """Geometric alpha_t weights truncated to the loop count"""
    if not 1 <= train_loops <= MAX_LOOPS:
        raise InvalidInputError(f"train_loops must be in 1..{MAX_LOOPS}, got {train_loops}")
    return _LOSS_WEIGHTS[:train_loops]


def validate_alternation(alternation: str, num_head_pairs: int) -> None:
    """Reject alternation strings that name head pairs the model does not have"""
    if not alternation:
        raise InvalidInputError("alternation must not be empty")
    allowed = {chr(ord("a") + i) for i in range(num_head_pairs)}
    unknown = sorted(set(alternation) - allowed)
    if unknown:
        raise InvalidInputError(
            f"alternation {alternation!r} uses head pairs {unknown} "
            f"but only {sorted(allowed)} exist (H={num_head_pairs})"
        )


def alternation_select(t: int, alternation: str) -> str:
    """
    Head pair used by loop t (1-based); loops beyond the string repeat it cyclically

    Args:
        t: Loop index, starting at 1
        alternation: Head-pair string such as "aab"

    Returns:
        The head pair id, a single lowercase letter
    """
    if t < 1:
        raise InvalidInputError(f"loop index must be >= 1, got {t}")
    if not alternation or not alternation.isalpha() or not alternation.islower():
        raise InvalidInputError(f"malformed alternation {alternation!r}")
    return alternation[(t - 1) % len(alternation)]


def pair_index(pair_id: str) -> int:
    """Position of a head pair id inside the model's head list"""
    return ord(pair_id) - ord("a")
