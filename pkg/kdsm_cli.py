"""
KDSM - 命令行入口

使用方法:
    python kdsm_cli.py gen-data --config config/world.yaml --out data/world
    python kdsm_cli.py cluster  --config config/kdsm_train.yaml --data data/world --setting A --fold 1 --out grouping.bin
    python kdsm_cli.py train    --config config/kdsm_train.yaml --data data/world --setting B --fold 1 --out ck.kckp
    python kdsm_cli.py eval     --ckpt ck.kckp --setting B --fold 1 [--assign greedy|max] [--out eval.json]
    python kdsm_cli.py infer    --ckpt ck.kckp --image f.pgm --prompt "fox face:nose" ...
    python kdsm_cli.py report   --in eval_*.json [--out report.json]
    python kdsm_cli.py ablate   --config config/kdsm_train.yaml --data data/world --setting A --fold 1 --alphas 1 1e-3 1e-6 0

退出码:
    0 成功 / 2 配置错误 / 3 数据错误 / 4 数值失败
"""

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from logger_config import get_logger
from models.errors import KDSMError, UsageError
from kdsm_engine.checkpoint_store import load_checkpoint, load_grouping, save_grouping
from kdsm_engine.config_compiler import ConfigCompiler, with_overrides, with_seed
from kdsm_engine.text_embeddings import parse_prompt_arg
from kdsm_engine.trainer import build_source, cluster_pairs, train
from evaluation.evalkit import aggregate
from evaluation.evaluator import evaluate, infer
from evaluation.report_generator import ReportGenerator
from synthworld.dataset_store import Dataset, generate_dataset

logger = logging.getLogger(__name__)

COMPONENT_VARIANTS = {
    'baseline': {'model': {'mode': 'baseline'}},
    'grouping': {'model': {'mode': 'kdsm', 'use_vkra': False}},
    'full': {'model': {'mode': 'kdsm', 'use_vkra': True}},
}


# ==========================================
# 子命令
# ==========================================

def cmd_gen_data(args, out) -> int:
    world = ConfigCompiler().compile_world(args.config)
    if args.workers:
        world = replace(world, workers=args.workers)
    if args.seed is not None:
        world = replace(world, seed=args.seed)
    ds = generate_dataset(world, args.out, max_categories=args.max_categories)
    out.result(f"✅ {len(ds)} samples, {len(ds.world)} species → {args.out}")
    return 0


def _compile_train_config(args):
    config = ConfigCompiler().compile(args.config)
    if getattr(args, 'mode', None):
        config = with_overrides(config, 'model', mode=args.mode)
    if getattr(args, 'steps', None):
        config = with_overrides(config, 'schedule', steps=args.steps, epochs=None)
    if getattr(args, 'alpha', None) is not None:
        config = with_overrides(config, 'loss', alpha=args.alpha)
    if getattr(args, 'seed', None) is not None:
        config = with_seed(config, args.seed)
    return config


def cmd_cluster(args, out) -> int:
    config = _compile_train_config(args)
    ds = Dataset(args.data)
    plan = ds.split(args.setting, args.fold)
    grouping = cluster_pairs(sorted(plan.train_pairs), config, build_source(config))
    save_grouping(grouping, args.out)
    out.result(f"✅ {len(grouping.assignment)} pairs → {len({*grouping.assignment.values()})}/{grouping.O} groups "
               f"(objective {grouping.objective:.6g}) → {args.out}")
    for g in sorted(set(grouping.assignment.values())):
        names = sorted({c for _, c in grouping.members(g)})
        out.result(f"  group {g:3d}: {', '.join(names)}")
    return 0


def cmd_train(args, out) -> int:
    config = _compile_train_config(args)
    ds = Dataset(args.data)
    plan = ds.split(args.setting, args.fold)
    resume = load_checkpoint(args.resume, requested_config=config.to_dict()) if args.resume else None
    grouping = load_grouping(args.grouping) if args.grouping else None

    out.banner(f"🚀 KDSM training: mode={config.model.mode} setting={plan.setting} fold={plan.fold}",
               f"   config version {config.version[:8]}, seed {config.seed}")
    ckpt = train(config, ds, plan, out_path=args.out, resume=resume, grouping=grouping,
                 extra_meta={'data_root': str(Path(args.data).resolve())})
    last = ckpt.log_tail[-1] if ckpt.log_tail else {}
    out.result(f"✅ step {ckpt.step}: loss={last.get('loss', float('nan')):.6f} → {args.out}")
    return 0


def cmd_eval(args, out) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data_root = args.data or ckpt.meta.get('data_root')
    if not data_root:
        raise UsageError("--data is required (checkpoint does not record its dataset)")
    setting = args.setting or ckpt.meta.get('setting')
    fold = args.fold or ckpt.meta.get('fold')
    if not setting or not fold:
        raise UsageError("--setting and --fold are required")
    ds = Dataset(data_root)
    metrics = evaluate(ckpt, ds, ds.split(setting, int(fold)), assignment_mode=args.assign,
                       expected_mode=args.mode, side=args.side)
    text = ReportGenerator.to_json(metrics.to_dict())
    if args.out:
        ReportGenerator.save_json(metrics.to_dict(), args.out)
    out.result(text.rstrip())
    return 0


def cmd_infer(args, out) -> int:
    ckpt = load_checkpoint(args.ckpt)
    prompts = [parse_prompt_arg(p) for p in args.prompt]
    preds = infer(ckpt, args.image, prompts, assignment_mode=args.assign)
    payload = [p.to_dict() for p in preds]
    if args.out:
        ReportGenerator.save_json({'image': args.image, 'keypoints': payload}, args.out)
    for p in payload:
        out.result(json.dumps(p, sort_keys=True))
    return 0


def cmd_report(args, out) -> int:
    report = aggregate(ReportGenerator.load_fold_reports(args.inputs))
    if args.out:
        ReportGenerator.save_json(report.to_dict(), args.out)
    out.result(ReportGenerator.render_text(report).rstrip())
    return 0


def cmd_ablate(args, out) -> int:
    base = _compile_train_config(args)
    ds = Dataset(args.data)
    plan = ds.split(args.setting, args.fold)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    variants = []
    if args.components:
        for name, overrides in COMPONENT_VARIANTS.items():
            config = base
            for section, values in overrides.items():
                config = with_overrides(config, section, **values)
            variants.append((name, config))
    for alpha in args.alphas or []:
        config = with_overrides(base, 'model', mode='kdsm')
        variants.append((f"alpha={alpha:g}", with_overrides(config, 'loss', alpha=alpha)))
    if not variants:
        raise UsageError("ablate needs --alphas and/or --components")

    rows = []
    for name, config in variants:
        out.result(f"🔄 {name}")
        safe = name.replace('=', '_')
        ckpt = train(config, ds, plan, out_path=str(out_dir / f"{safe}.kckp"))
        metrics = evaluate(ckpt, ds, plan)
        rows.append({'variant': name, 'pck_02': metrics.pck_02, 'pck_005': metrics.pck_005, 'nme': metrics.nme})

    ReportGenerator.save_json({'setting': plan.setting, 'fold': plan.fold, 'rows': rows},
                              str(out_dir / "ablation.json"))
    out.result(ReportGenerator.render_ablation(rows).rstrip())
    return 0


# ==========================================
# 参数解析
# ==========================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='kdsm', description='Open-vocabulary keypoint detection (KDSM)')
    parser.add_argument('--log-level', default=None, help='覆盖 LOG_LEVEL 环境变量')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='生成合成数据集')
    p.add_argument('--config', required=True, help='世界配置 YAML')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--workers', type=int, default=None, help='渲染线程数')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--max-categories', type=int, default=None, help='O，用于提前检查')
    p.set_defaults(func=cmd_gen_data)

    def add_train_args(p, with_out=True):
        p.add_argument('--config', required=True, help='训练配置 YAML')
        p.add_argument('--data', required=True, help='数据集目录')
        p.add_argument('--setting', required=True, choices=['A', 'B'])
        p.add_argument('--fold', required=True, type=int)
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--steps', type=int, default=None, help='覆盖 schedule.steps')
        if with_out:
            p.add_argument('--out', required=True)

    p = sub.add_parser('cluster', help='对训练侧类别做约束聚类')
    add_train_args(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser('train', help='训练')
    add_train_args(p)
    p.add_argument('--mode', choices=['baseline', 'kdsm'], default=None)
    p.add_argument('--alpha', type=float, default=None)
    p.add_argument('--grouping', default=None, help='cluster 输出的分组文件')
    p.add_argument('--resume', default=None, help='续训的检查点')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='零样本评估')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', default=None, help='数据集目录（默认取检查点记录）')
    p.add_argument('--setting', choices=['A', 'B'], default=None)
    p.add_argument('--fold', type=int, default=None)
    p.add_argument('--assign', choices=['max', 'greedy'], default=None)
    p.add_argument('--mode', choices=['baseline', 'kdsm'], default=None, help='要求的检查点模式')
    p.add_argument('--side', choices=['test', 'train'], default='test')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('infer', help='单图推理')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--image', required=True, help='PGM 图像')
    p.add_argument('--prompt', required=True, action='append', help='"species:category"，可重复')
    p.add_argument('--assign', choices=['max', 'greedy'], default=None)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('report', help='汇总多个 eval 输出')
    p.add_argument('--in', dest='inputs', required=True, nargs='+')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('ablate', help='α 扫描 / 组件消融')
    add_train_args(p)
    p.add_argument('--alphas', type=float, nargs='*', default=None)
    p.add_argument('--components', action='store_true', help='baseline / +grouping / +grouping+attention')
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    out = get_logger(level=args.log_level)
    try:
        return args.func(args, out)
    except KDSMError as e:
        out.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
