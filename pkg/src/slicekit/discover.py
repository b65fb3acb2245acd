"""Detection efficacy and the confidence / random selection baselines.

Efficacy is the percentage of a selected id set that the frozen classifier
actually mispredicts; correctness comes from a truth oracle held by the
evaluation harness, never by the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bundle import UnlabeledBundle
from .errors import RangeError, UndefinedEfficacyError, ValidationError
from .sdm import SliceModel, detect_error_prone


def efficacy(selected: Sequence[str], truth: Mapping[str, bool]) -> float:
    """100 * |mispredicted within selected| / |selected|."""
    sel = list(selected)
    if not sel:
        raise UndefinedEfficacyError("efficacy of an empty selection is undefined")
    missing = [s for s in sel if s not in truth]
    if missing:
        raise ValidationError(f"selected ids missing from truth oracle: {missing[:5]}")
    wrong = sum(1 for s in sel if not truth[s])
    return 100.0 * wrong / len(sel)


def confidence_baseline(bundle: UnlabeledBundle, n: int) -> list[str]:
    """The n ids with the lowest max-class confidence, ascending, ties by id."""
    if not 0 <= n <= bundle.n:
        raise RangeError(f"n must lie in [0, {bundle.n}], got {n}")
    max_conf = bundle.conf.astype(np.float64).max(axis=1)
    order = sorted(range(bundle.n), key=lambda r: (max_conf[r], bundle.ids[r]))
    return [bundle.ids[r] for r in order[:n]]


def random_baseline(bundle: UnlabeledBundle, n: int, seed: int) -> list[str]:
    """Uniform sample of n ids without replacement, deterministic per seed."""
    if not 0 <= n <= bundle.n:
        raise RangeError(f"n must lie in [0, {bundle.n}], got {n}")
    rng = np.random.default_rng(seed)
    rows = rng.choice(bundle.n, size=n, replace=False)
    return [bundle.ids[r] for r in rows]


@dataclass(frozen=True)
class DiscoverReport:
    """Per-method (num selected, efficacy); efficacy None when undefined."""

    rows: tuple[tuple[str, int, float | None], ...]
    domino_inference_extension: bool = False

    def row(self, method: str) -> tuple[int, float | None]:
        for name, num, eff in self.rows:
            if name == method:
                return num, eff
        raise KeyError(method)


def _eff_or_none(selected: Sequence[str], truth: Mapping[str, bool]) -> float | None:
    try:
        return efficacy(selected, truth)
    except UndefinedEfficacyError:
        return None


def discover_report(
    model: SliceModel,
    bundle: UnlabeledBundle,
    truth: Mapping[str, bool],
    seed: int,
    domino_model: SliceModel | None = None,
) -> DiscoverReport:
    """Efficacy table for the mixture detection and both baselines.

    The confidence and random baselines select exactly as many points as the
    mixture detection did.
    """
    detected = detect_error_prone(model, bundle)
    n = len(detected)
    rows: list[tuple[str, int, float | None]] = [
        ("edisa", n, _eff_or_none(detected, truth))
    ]
    extension = False
    if domino_model is not None:
        d_detected = detect_error_prone(domino_model, bundle)
        rows.append(("domino", len(d_detected), _eff_or_none(d_detected, truth)))
        extension = True
    rows.append(("confidence", n, _eff_or_none(confidence_baseline(bundle, n), truth)))
    rows.append(("random", n, _eff_or_none(random_baseline(bundle, n, seed), truth)))
    return DiscoverReport(rows=tuple(rows), domino_inference_extension=extension)
