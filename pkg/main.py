"""
命令行入口

    python main.py run --experiment first-order --model example-3-10 --dt 1e-3
    python main.py run --config configs/fast_clt.toml --paths 2000 --assert

退出码：0 成功；1 --assert 下验收未通过；2 配置错误；3 其他运行错误
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from app.config.settings import config_hash, config_payload, load_settings
from app.core.exceptions import AcceptanceError, ConfigurationError, LobError
from app.router import ExperimentContext, router
from app.schema.base import BaseReport
from app.schema.report import ExperimentReport

logger = logging.getLogger("lob")

# 命令行参数 → 配置块字段
FLAG_FIELDS = {
    "experiment": ("experiment", "name"),
    "model": ("model", "name"),
    "regime": ("scaling", "regime"),
    "dt": ("scaling", "dt"),
    "alpha": ("scaling", "alpha"),
    "beta": ("scaling", "beta"),
    "paths": ("monte_carlo", "paths"),
    "seed": ("monte_carlo", "seed"),
    "stride": ("monte_carlo", "stride"),
    "parallelism": ("monte_carlo", "parallelism"),
    "out": ("output", "out_dir"),
    "persist_paths": ("output", "persist_paths"),
    "formats": ("output", "formats"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lob", description="多尺度限价簿模型的模拟与极限检验")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="运行一个实验")
    run.add_argument("--config", help="TOML 配置文件")
    run.add_argument("--experiment", choices=router.names())
    run.add_argument("--model", help="内置模型名")
    run.add_argument("--regime", choices=["fast", "slow", "first-order"])
    run.add_argument("--dt", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--paths", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="产物目录")
    run.add_argument("--stride", type=int, help="每条路径的快照数")
    run.add_argument("--parallelism", type=int, help="进程数，缺省为逻辑核数")
    run.add_argument("--persist-paths", dest="persist_paths", action="store_true", default=None,
                     help="写出逐路径序列到 <out>/paths/")
    run.add_argument("--formats", nargs="+", choices=["csv", "json"], help="逐路径序列的格式")
    run.add_argument("--assert", dest="enforce", action="store_true", help="验收未通过时以退出码 1 结束")
    run.add_argument("--log-level", default=None)
    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    """只收集显式给出的参数，按配置块组织成嵌套 dict"""
    overrides: Dict[str, Any] = {}
    for flag, (block, key) in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(block, {})[key] = value
    if args.enforce:
        overrides["enforce"] = True
    if args.log_level:
        overrides["LOG_LEVEL"] = args.log_level
    return overrides


def _error_report(e: LobError) -> BaseReport[Dict[str, Any]]:
    return BaseReport[Dict[str, Any]](code=e.exit_code, message=e.message, data=e.to_dict())


def run(args: argparse.Namespace) -> int:
    try:
        settings = load_settings(args.config, **overrides_from(args))
        logging.getLogger().setLevel(settings.LOG_LEVEL.upper())
        config = settings.to_run_config()
    except ConfigurationError as e:
        for field in e.detail.get("fields", []):
            logger.error(f"配置错误 {field['loc']}: {field['msg']}")
        print(_error_report(e).model_dump_json(indent=2), file=sys.stderr)
        return e.exit_code

    digest = config_hash(config)
    ctx = ExperimentContext.create(config, digest)
    ctx.storage.write_json(config_payload(config), "config.json")
    exit_code = 0
    try:
        report = router.dispatch(ctx)
        report.artifacts = sorted(set(ctx.storage.artifacts) | {"report.json"})
        report.diagnostics.update({f"monitor_{k}": v for k, v in ctx.monitor.summary().items() if k != "elapsed"})
        ctx.storage.write_json(BaseReport[ExperimentReport](data=report), "report.json")
        _log_criteria(report)
        if config.enforce and not report.passed:
            failed: List[str] = [c.name for c in report.criteria if not c.passed and not c.diagnostic]
            raise AcceptanceError("验收条件未通过", {"failed": failed})
    except LobError as e:
        exit_code = e.exit_code
        logger.error(f"{type(e).__name__}: {e.message} {e.detail}")
        ctx.storage.write_json(_error_report(e), "error.json")
    finally:
        ctx.storage.write_manifest(digest, config.monte_carlo.seed, config.experiment.name, exit_code)
    logger.info(f"运行结束，耗时 {ctx.monitor.summary()['elapsed']:.1f}s，退出码 {exit_code}")
    return exit_code


def _log_criteria(report: ExperimentReport) -> None:
    for c in report.criteria:
        tag = "PASS" if c.passed else ("INFO" if c.diagnostic else "FAIL")
        logger.info(f"[{tag}] {c.name}: value={c.value}, threshold={c.threshold}")


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
