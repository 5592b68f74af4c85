"""Ablation sweeps: one training run per (arm, seed), evaluated on the held-out split."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import RunConfig
from .training import evaluate, predict_full, prepare_split, train

LAMBDA4_VALUES = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
AXES = ("attention", "lpcl", "lambda4", "feature_level")
DEFAULT_LAMBDA4 = 0.3


def arms(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """Named configs that differ from ``cfg`` only along ``axis``."""
    lam = cfg.loss.lpcl if cfg.loss.lpcl > 0 else DEFAULT_LAMBDA4

    def with_(ag: bool | None = None, **loss_lpcl):
        c = cfg
        if ag is not None:
            c = replace(c, model=replace(c.model, use_attention_gates=ag))
        if "lam" in loss_lpcl:
            c = replace(c, loss=replace(c.loss, lpcl=loss_lpcl.pop("lam")))
        if loss_lpcl:
            c = replace(c, lpcl=replace(c.lpcl, **loss_lpcl))
        return c

    if axis == "attention":
        return [
            ("UKAN", with_(False, lam=0.0)),
            ("UKAN+AG", with_(True, lam=0.0)),
            ("UKAN+LPCL", with_(False, lam=lam)),
            ("UKAN+AG+LPCL", with_(True, lam=lam)),
        ]
    if axis == "lpcl":
        return [
            ("without_lpcl", with_(lam=0.0)),
            ("lpcl_view_only", with_(lam=lam, mode="view_only")),
            ("lpcl_label_masked", with_(lam=lam, mode="label_masked")),
        ]
    if axis == "lambda4":
        return [(f"lambda4={v:g}", with_(lam=v)) for v in LAMBDA4_VALUES]
    if axis == "feature_level":
        return [(f"level{k}", with_(lam=lam, feature_level=k)) for k in (3, 4, 5)]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(cfg: RunConfig, axis: str, seeds=None, verbose: bool = False) -> dict:
    """Train every arm for every seed; arms of one seed share model init and data stream.

    Rows carry held-out F1 / MIoU / AUC of the final model and the per-epoch
    patch-corner hashes, so the shared data order can be checked.
    """
    seeds = list(seeds) if seeds is not None else [cfg.train.seed]
    arm_list = arms(cfg, axis)
    rows = []
    for seed in seeds:
        seeded = [(name, replace(c, model=replace(c.model, seed=seed), train=replace(c.train, seed=seed))) for name, c in arm_list]
        split = prepare_split(seeded[0][1])
        for name, c in seeded:
            res = train(c, data=split, verbose=verbose)
            model = res.model
            ev = evaluate(lambda s, m=model, p=c.train.patch_size: predict_full(m, s.image, p), split.val)
            agg = ev["aggregate"]
            rows.append({
                "arm": name,
                "seed": seed,
                "f1": agg["f1"],
                "miou": agg["miou"],
                "auc": agg["auc"],
                "final_loss": res.history[-1]["loss"] if res.history else None,
                "patch_hashes": [h["patch_hash"] for h in res.history],
            })  # fmt: skip
    summary = {}
    for name, _ in arm_list:
        sel = [r for r in rows if r["arm"] == name]
        summary[name] = {k: float(np.mean([r[k] for r in sel])) for k in ("f1", "miou", "auc")}
    base = arm_list[0][0]
    for name in summary:
        summary[name]["delta_f1_vs_" + base] = summary[name]["f1"] - summary[base]["f1"]
    return {"axis": axis, "seeds": seeds, "arms": [n for n, _ in arm_list], "rows": rows, "summary": summary}
