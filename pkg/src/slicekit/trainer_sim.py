"""Reference trainer for the active-learning protocol.

Invoked as ``python -m slicekit.trainer_sim <scenario_dir> <request.json>``.
Retrains the scenario's built-in classifier on exactly the requested train
ids, then writes a labeled validation bundle, an unlabeled bundle covering
exactly the remaining pool ids, and the response JSON at the paths named in
the request. Exits nonzero with a message on stderr for any malformed input.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .bundle import LabeledBundle, UnlabeledBundle, save_bundle
from .synth import classifier_conf, featurize, fit_ridge_logistic

_REQUIRED = (
    "format_version",
    "iteration",
    "train_ids",
    "pool_ids",
    "val_bundle_path",
    "pool_bundle_path",
    "response_path",
)


def run(scenario_dir: str, request_path: str) -> int:
    data_path = Path(scenario_dir) / "data.npz"
    if not data_path.exists():
        print(f"trainer_sim: no data.npz under {scenario_dir}", file=sys.stderr)
        return 1
    try:
        request = json.loads(Path(request_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"trainer_sim: cannot read request: {exc}", file=sys.stderr)
        return 1
    missing = [k for k in _REQUIRED if k not in request]
    if missing:
        print(f"trainer_sim: request missing fields {missing}", file=sys.stderr)
        return 1
    if int(request["format_version"]) != 1:
        print(
            f"trainer_sim: unsupported format_version {request['format_version']}",
            file=sys.stderr,
        )
        return 1

    data = np.load(data_path, allow_pickle=False)
    train_index = {pid: r for r, pid in enumerate(data["train_ids"].tolist())}
    unknown = [i for i in request["train_ids"] + request["pool_ids"] if i not in train_index]
    if unknown:
        print(f"trainer_sim: unknown ids {unknown[:5]}", file=sys.stderr)
        return 1
    rows = np.asarray([train_index[i] for i in request["train_ids"]], dtype=int)
    if rows.size < 2:
        print("trainer_sim: need at least 2 train ids", file=sys.stderr)
        return 1

    centers = data["centers"]
    width = float(data["rbf_width"])
    ridge = float(data["ridge"])
    ridge_linear = float(data["ridge_linear"])
    iters = int(data["irls_iters"])
    x_train = data["train_x"][rows]
    y_train = data["train_gold"][rows].astype(float)
    w = fit_ridge_logistic(
        featurize(x_train, centers, width),
        y_train,
        ridge=ridge,
        ridge_linear=ridge_linear,
        iters=iters,
    )

    val_conf = classifier_conf(data["val_x"], w, centers)
    val_gold = data["val_gold"]
    val = LabeledBundle(
        ids=tuple(data["val_ids"].tolist()),
        z=data["val_z"],
        conf=val_conf,
        labels=val_gold,
        num_classes=2,
    )
    pool_rows = np.asarray([train_index[i] for i in request["pool_ids"]], dtype=int)
    pool = UnlabeledBundle(
        ids=tuple(request["pool_ids"]),
        z=data["train_z"][pool_rows],
        conf=classifier_conf(data["train_x"][pool_rows], w, centers),
        num_classes=2,
    )

    save_bundle(val, request["val_bundle_path"])
    save_bundle(pool, request["pool_bundle_path"])
    accuracy = float(np.mean(np.argmax(val_conf, axis=1) == val_gold))
    response = {
        "format_version": 1,
        "iteration": int(request["iteration"]),
        "val_accuracy": accuracy,
        "val_bundle": request["val_bundle_path"],
        "pool_bundle": request["pool_bundle_path"],
    }
    Path(request["response_path"]).write_text(
        json.dumps(response, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print(
            "usage: python -m slicekit.trainer_sim <scenario_dir> <request.json>",
            file=sys.stderr,
        )
        return 1
    return run(argv[0], argv[1])


if __name__ == "__main__":
    sys.exit(main())
