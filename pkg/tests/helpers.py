import numpy as np


def random_labels(rng, length, num_classes, max_segments=None):
    """Piecewise-constant label sequence with distinct neighbouring classes."""
    n_seg = rng.integers(1, (max_segments or length) + 1)
    n_seg = min(n_seg, length)
    cuts = np.sort(rng.choice(np.arange(1, length), size=n_seg - 1, replace=False)) if n_seg > 1 else []
    edges = [0, *cuts, length]
    labels = np.empty(length, dtype=np.int64)
    prev = -1
    for s, e in zip(edges[:-1], edges[1:]):
        c = rng.integers(num_classes)
        while c == prev and num_classes > 1:
            c = rng.integers(num_classes)
        labels[s:e] = c
        prev = c
    return labels


# (criterion, passed, detail) rows printed by the terminal summary hook
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))
