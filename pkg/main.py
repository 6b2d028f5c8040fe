# -*- coding: utf-8 -*-
"""
main.py
-------
命令列入口：synth → label → rollout → filter → label-cf → mix → eval，外加 round-plan。

結束碼：0 成功、1 參數錯誤、2 資料錯誤、3 外部服務失敗
"""

import os
import re
import glob
import sys
import argparse
from dataclasses import replace

import pandas as pd
import yaml
from dotenv import load_dotenv

from common import (
    CurationError, DataError, ServiceError, load_config, merge_overrides, log, set_quiet, write_jsonl,
)
from trajgeo import VehicleFootprint
from scenelab import LabelerConfig, synth_suite, label_scene, SUITES
from codec import LossPolicy, LOSS_PRESETS
from clients import build_policy, build_teacher, THINK_MODES
from pipeline import (
    RolloutConfig, FilterConfig, DatasetMixSpec, rollout_batch, filter_decision, scatter_export,
    label_batch, assemble_meta_sample, assemble_traj_sample, mix_datasets, plan_round,
)
from records import (
    read_scenes, write_scenes, snap_scene, read_rollouts, write_rollouts, write_records,
    read_record_rows, read_predictions,
)
from processor import build_report

# 💡 憑證只從環境變數 (.env) 讀
load_dotenv()


class _Parser(argparse.ArgumentParser):
    """參數錯誤一律結束碼 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _out(cfg, path, default_name):
    return path or os.path.join(cfg["output_dir"], default_name)


def _pairs(items, cast, what):
    """["traj=1", "meta=10"] → {"traj": 1, "meta": 10}"""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise DataError(f"{what} must look like name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = cast(v.strip())
        except ValueError:
            raise DataError(f"{what} {item!r}: bad value")
    return out


# ========== 1. 子命令 ==========
def cmd_synth(args, cfg):
    seed = cfg["seed"]
    scenes = [snap_scene(s) for s in synth_suite(args.suite, args.n, seed, args.val_fraction)]
    path = _out(cfg, args.out, "scenes.jsonl")
    n = write_scenes(scenes, path)
    n_val = sum(1 for s in scenes if s.split == "val")
    log(f"✅ 合成 {n} 個場景 (suite={args.suite}, seed={seed}, val={n_val}) → {path}")


def cmd_label(args, cfg):
    labeler = LabelerConfig.from_dict(cfg["labeler"])
    scenes = read_scenes(args.scenes)
    labeled = [replace(s, gt_plan=label_scene(s.expert_future, s.history, s.route, labeler)) for s in scenes]
    path = _out(cfg, args.out, "labeled.jsonl")
    n = write_scenes(labeled, path)
    log(f"✅ 自動標註 {n} 個場景 → {path}")


def cmd_rollout(args, cfg):
    rc = cfg["rollout"]
    scenes = read_scenes(args.scenes)
    policy = build_policy(cfg["clients"]["policy"], scenes, rc["strength"], rc["noise"])
    rcfg = RolloutConfig(k=int(rc["k"]), temperature=float(rc["temperature"]), seed=int(cfg["seed"]),
                         think_mode=rc["think_mode"], include_route=bool(args.include_route))
    log(f"🚀 開始 rollout | 場景: {len(scenes)} | k={rcfg.k} | policy={policy.name} | 線程: {cfg['parallelism']}")
    results, skipped = rollout_batch(policy, scenes, rcfg, int(cfg["parallelism"]))
    if skipped and not results:
        raise ServiceError(f"policy failed on all {skipped} scenes")
    path = _out(cfg, args.out, "rollouts.jsonl")
    write_rollouts(results, path)
    log(f"📊 rollout 完成: {len(results)} 成功 / {skipped} 跳過 → {path}")


def _filter_cfg(cfg):
    return FilterConfig(epsilon=float(cfg["filter"]["epsilon"]), mode=cfg["filter"]["mode"])


def cmd_filter(args, cfg):
    fcfg = _filter_cfg(cfg)
    results = read_rollouts(args.results)
    rows = scatter_export(results, fcfg)
    scatter_path = _out(cfg, args.scatter, "scatter.csv")
    os.makedirs(os.path.dirname(os.path.abspath(scatter_path)), exist_ok=True)
    pd.DataFrame(rows, columns=["scene_id", "minade_free", "minade_pf", "free_iou", "selected"]) \
        .to_csv(scatter_path, index=False)
    selected = [r["scene_id"] for r in rows if r["selected"]]
    path = _out(cfg, args.out, "selected.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(f"{sid}\n" for sid in selected)
    log(f"📊 篩選 ({fcfg.mode}, ε={fcfg.epsilon}): {len(selected)} / {len(results)} 個場景入選 → {path}")


def cmd_labelcf(args, cfg):
    loss = LossPolicy.from_config(cfg["loss"])
    scenes = read_scenes(args.scenes)
    kind = "meta" if args.meta_only else args.kind
    round_tag = f"cf_round_{args.round}" if kind == "cf" else kind
    path = _out(cfg, args.out, f"{round_tag}.jsonl")

    if args.results:
        by_id = {s.id: s for s in scenes}
        fcfg = _filter_cfg(cfg)
        results = read_rollouts(args.results)
        unknown = [r.scene_id for r in results if r.scene_id not in by_id]
        if unknown:
            raise DataError(f"rollouts reference unknown scenes: {unknown[:5]}")
        pairs = [(by_id[r.scene_id], r) for r in results if filter_decision(r, fcfg)]
    elif kind == "cf":
        raise DataError("label-cf needs --results to build cf records")
    else:
        pairs = [(s, None) for s in scenes]

    if kind == "cf":
        teacher = build_teacher(cfg["clients"]["teacher"])
        records, skipped = label_batch(teacher, pairs, int(cfg["parallelism"]), cfg=_filter_cfg(cfg), loss=loss,
                                       round_tag=round_tag, include_route=bool(args.include_route))
        if skipped and not records:
            raise ServiceError(f"teacher failed on all {skipped} scenes")
    else:
        assemble = assemble_meta_sample if kind == "meta" else assemble_traj_sample
        records = [assemble(s, loss=loss, include_route=bool(args.include_route)) for s, _ in pairs]
        skipped = 0
    n = write_records(records, path)
    log(f"✅ {kind} 樣本 {n} 筆 (跳過 {skipped}) → {path}")


def cmd_mix(args, cfg):
    sources_paths = _pairs(args.source, str, "--source")
    datasets = _pairs(args.dataset, int, "--dataset") or cfg["mix"]["datasets"]
    spec = DatasetMixSpec.from_dict(datasets, cfg["mix"]["seed"], cfg["mix"]["shuffle_window"])
    sources = {name: read_record_rows(p) for name, p in sources_paths.items()}
    mixed = mix_datasets(spec, sources)
    path = _out(cfg, args.out, "mixed.jsonl")
    n = write_jsonl(mixed, path)
    log(f"✅ 混合完成: {n} 筆 ({', '.join(f'{k}×{v}' for k, v in spec.entries)}) → {path}")


def cmd_eval(args, cfg):
    fp = VehicleFootprint(float(cfg["ego_footprint"]["length"]), float(cfg["ego_footprint"]["width"]))
    report = build_report(read_scenes(args.scenes), read_predictions(args.predictions), fp,
                          bands=cfg["eval"]["bands"], split=args.split)
    out_dir = args.out_dir or os.path.join(cfg["output_dir"], "eval")
    os.makedirs(out_dir, exist_ok=True)
    report["summary"].to_csv(os.path.join(out_dir, "summary.csv"), index=False)
    report["bands"].to_csv(os.path.join(out_dir, "bands.csv"), index=False)
    report["scenes"].to_csv(os.path.join(out_dir, "scenes.csv"), index=False)
    if not args.quiet:
        print(report["summary"].to_string(index=False))
        print()
        print(report["bands"].to_string(index=False))
    log(f"📊 評估完成: {len(report['scenes'])} 個場景 → {out_dir}")


def _rounds_on_disk(output_dir):
    """output_dir 裡現有的 cf_round_N.jsonl 輪次；目錄不存在回傳 None"""
    if not os.path.isdir(output_dir):
        return None
    found = [re.fullmatch(r"cf_round_(\d+)\.jsonl", os.path.basename(p))
             for p in glob.glob(os.path.join(output_dir, "cf_round_*.jsonl"))]
    return sorted(int(m.group(1)) for m in found if m)


def cmd_round_plan(args, cfg):
    available = args.available
    if available is None:
        available = _rounds_on_disk(cfg["output_dir"])
    spec = plan_round(args.round, args.variant, available, int(cfg["mix"]["seed"]))
    text = yaml.safe_dump(spec.to_dict(), sort_keys=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")


# ========== 2. 參數 ==========
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="config.yaml 路徑")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--parallelism", type=int, default=None)
    common.add_argument("--output-dir", default=None)
    common.add_argument("--quiet", action="store_true", help="關閉 log 與進度條")

    parser = _Parser(prog="main.py", description="counterfactual meta-action data curation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="合成場景")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--suite", default="mixed", choices=sorted(SUITES))
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", parents=[common], help="規則式自動標註 meta-action")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", default=None)
    for name in LabelerConfig.__dataclass_fields__:
        p.add_argument(f"--{name.replace('_', '-')}", type=float, default=None, dest=f"labeler_{name}")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("rollout", parents=[common], help="free / prefilled 兩組 rollout")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--think-mode", choices=THINK_MODES, default=None)
    p.add_argument("--include-route", action="store_true")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("filter", parents=[common], help="依軌跡落差篩選")
    p.add_argument("--results", required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--mode", choices=["filtered", "whole"], default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--scatter", default=None)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("label-cf", parents=[common], help="老師模型反思 → 訓練樣本")
    p.add_argument("--scenes", required=True)
    p.add_argument("--results", default=None)
    p.add_argument("--kind", choices=["cf", "meta", "traj"], default="cf")
    p.add_argument("--meta-only", action="store_true", help="篩選後場景只產生 meta 樣本")
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--mode", choices=["filtered", "whole"], default=None)
    p.add_argument("--loss-preset", choices=sorted(LOSS_PRESETS), default=None)
    p.add_argument("--w-act", type=float, default=None)
    p.add_argument("--w-meta", type=float, default=None)
    p.add_argument("--w-cf", type=float, default=None)
    p.add_argument("--include-route", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_labelcf)

    p = sub.add_parser("mix", parents=[common], help="依倍率混合資料集")
    p.add_argument("--source", action="append", required=True, help="name=path，例如 meta=runs/meta.jsonl")
    p.add_argument("--dataset", action="append", default=None, help="name=倍率，覆寫 config 的 mix.datasets")
    p.add_argument("--shuffle-window", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("eval", parents=[common], help="評估預測")
    p.add_argument("--predictions", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", choices=["train", "val"], default=None)
    p.add_argument("--bands", type=float, nargs="+", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("round-plan", parents=[common], help="印出某一輪的資料集組合")
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--variant", choices=["three_ds", "four_ds"], default="three_ds")
    p.add_argument("--available", type=int, nargs="*", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_round_plan)
    return parser


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)
    seed = g("seed")
    return {
        "seed": seed,
        "parallelism": g("parallelism"),
        "output_dir": g("output_dir"),
        "rollout": {"k": g("k"), "temperature": g("temperature"), "strength": g("strength"),
                    "noise": g("noise"), "think_mode": g("think_mode")},
        "filter": {"epsilon": g("epsilon"), "mode": g("mode")},
        "labeler": {name: g(f"labeler_{name}") for name in LabelerConfig.__dataclass_fields__},
        "loss": {"preset": g("loss_preset"), "w_act": g("w_act"), "w_meta": g("w_meta"), "w_cf": g("w_cf")},
        "mix": {"seed": seed, "shuffle_window": g("shuffle_window")},
        "eval": {"bands": g("bands")},
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_quiet(args.quiet)
    try:
        cfg = merge_overrides(load_config(args.config), _overrides(args))
        if int(cfg["parallelism"]) < 1:
            raise DataError("parallelism must be >= 1")
        args.func(args, cfg)
    except CurationError as e:
        log(f"❌ {e}")
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        log(f"❌ 找不到檔案: {e.filename}")
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
