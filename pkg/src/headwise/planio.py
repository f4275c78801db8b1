"""Plan JSON files and influence CSV digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .dispatch import ARROW, CompressionPlan, HeadStrategy, PlanError
from .tensor import AttentionDims

PLAN_VERSION = 1


@dataclass
class PlanFile:
    plan: CompressionPlan
    delta: Optional[float] = None
    coeff: Optional[float] = None
    window_set: Tuple[int, ...] = ()
    influence_digest: Optional[str] = None


def csv_digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def plan_to_dict(pf: PlanFile) -> dict:
    p = pf.plan
    return {
        "version": PLAN_VERSION,
        "dims": {
            "T": p.n_timesteps,
            "L": p.n_layers,
            "H": p.dims.n_heads,
            "d": p.dims.head_dim,
            "n_visual": p.dims.n_visual,
            "n_text": p.dims.n_text,
            "block": p.block_size,
            "text_first": p.dims.text_first,
        },
        "delta": pf.delta,
        "coeff": pf.coeff,
        "window_set": list(pf.window_set),
        "plan": [
            {
                "t": t,
                "layer": layer,
                "heads": [
                    {"kind": s.kind, "window_blocks": s.window_blocks}
                    if s.kind == ARROW
                    else {"kind": s.kind}
                    for s in heads
                ],
            }
            for (t, layer), heads in p.items()
        ],
        "influence_digest": pf.influence_digest,
    }


def plan_from_dict(doc: dict) -> PlanFile:
    try:
        if doc.get("version") != PLAN_VERSION:
            raise PlanError(f"unsupported plan version {doc.get('version')!r}")
        d = doc["dims"]
        dims = AttentionDims(
            int(d["H"]), int(d["d"]), int(d["n_visual"]), int(d["n_text"]),
            bool(d.get("text_first", False)),
        )
        plan = CompressionPlan(dims, int(d["T"]), int(d["L"]), int(d["block"]))
        for entry in doc["plan"]:
            key = (int(entry["t"]), int(entry["layer"]))
            if key in plan.layers:
                raise PlanError(f"duplicate plan entry for t={key[0]}, layer={key[1]}")
            plan[key] = [
                HeadStrategy(h["kind"], h.get("window_blocks")) for h in entry["heads"]
            ]
        pf = PlanFile(
            plan,
            doc.get("delta"),
            doc.get("coeff"),
            tuple(doc.get("window_set", ())),
            doc.get("influence_digest"),
        )
    except PlanError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanError(f"malformed plan file: {exc}") from exc
    plan.validate()
    return pf


def dumps(pf: PlanFile) -> str:
    return json.dumps(plan_to_dict(pf), indent=1)


def loads(text: str) -> PlanFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanError(f"plan file is not valid JSON: {exc}") from exc
    return plan_from_dict(doc)


def save(pf: PlanFile, path) -> None:
    Path(path).write_text(dumps(pf))


def load(path) -> PlanFile:
    return loads(Path(path).read_text())
