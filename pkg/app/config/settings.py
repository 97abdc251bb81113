import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union

from pydantic import ValidationError
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from app.core.exceptions import ConfigurationError
from app.core.scaling import Regime
from app.schema.run_config import (
    ExperimentConfig,
    GridConfig,
    ModelConfig,
    MonteCarloConfig,
    OutputConfig,
    RunConfig,
    ScalingConfig,
)


class RunSettings(BaseSettings):
    """
    运行配置

    优先级：命令行参数（init kwargs） > 环境变量（LOB_ 前缀，嵌套用 __） > .env > TOML 配置文件 > 缺省值
    例如 LOB_SCALING__DT=1e-3、LOB_MONTE_CARLO__PATHS=2000
    """

    scaling: ScalingConfig = ScalingConfig()
    grid: GridConfig = GridConfig()
    model: ModelConfig = ModelConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    monte_carlo: MonteCarloConfig = MonteCarloConfig()
    output: OutputConfig = OutputConfig()
    enforce: bool = False

    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="LOB_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        sources = [init_settings, env_settings, dotenv_settings]
        if settings_cls.model_config.get("toml_file"):
            sources.append(TomlConfigSettingsSource(settings_cls))
        return tuple(sources)

    def to_run_config(self) -> RunConfig:
        """做跨块校验，返回可序列化的 RunConfig"""
        payload = self.model_dump(exclude={"LOG_LEVEL"})
        try:
            return RunConfig.model_validate(payload)
        except ValidationError as e:
            raise _configuration_error(e) from e


# 各实验未显式给出的字段取这里的值（优先级低于所有配置源）
EXPERIMENT_PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "fast-clt": {
        "scaling": {"regime": Regime.FAST, "alpha": 0.6, "beta": 0.8, "dt": 1e-4},
        "model": {"name": "example-fast"},
    },
    "slow-clt": {
        "scaling": {"regime": Regime.SLOW, "alpha": 0.4, "beta": 0.6, "dt": 1e-4},
    },
    "liquidation": {
        "scaling": {"regime": Regime.FAST, "alpha": 0.6, "beta": 0.8, "dt": 1e-4},
        "model": {"name": "example-fast"},
    },
}


def apply_presets(settings: RunSettings) -> RunSettings:
    """
    按实验补全未显式设置的字段，例如 --experiment fast-clt 缺省切到 fast 区间与 example-fast

    永久冲击清算的缺省区间是 slow。
    """
    name = settings.experiment.name
    preset = {block: dict(fields) for block, fields in EXPERIMENT_PRESETS.get(name, {}).items()}
    if name == "liquidation" and settings.experiment.impact == "permanent":
        preset["scaling"] = {"regime": Regime.SLOW, "alpha": 0.4, "beta": 0.6, "dt": 1e-4}
        preset.pop("model", None)
    updates = {}
    for block, fields in preset.items():
        current = getattr(settings, block)
        missing = {k: v for k, v in fields.items() if k not in current.model_fields_set}
        if missing:
            updates[block] = current.model_copy(update=missing)
    return settings.model_copy(update=updates) if updates else settings


def _configuration_error(e: ValidationError) -> ConfigurationError:
    fields = [{"loc": ".".join(str(p) for p in err["loc"]), "msg": err["msg"]} for err in e.errors()]
    first = fields[0]["loc"] if fields else ""
    return ConfigurationError(f"配置校验失败: {first}", {"fields": fields})


def load_settings(config_file: Optional[Union[str, Path]] = None, **overrides: Any) -> RunSettings:
    """
    按优先级合并各配置源

    Args:
        config_file: TOML 配置文件
        overrides: 命令行覆盖，嵌套块用 dict，如 scaling={"dt": 1e-3}

    Raises:
        ConfigurationError: 文件不存在或校验失败，detail['fields'] 给出字段路径
    """
    cls = RunSettings
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigurationError("配置文件不存在", {"fields": [{"loc": "config", "msg": str(path)}]})
        cls = type("FileRunSettings", (RunSettings,), {"model_config": {**RunSettings.model_config, "toml_file": path}})
    try:
        return apply_presets(cls(**overrides))
    except ValidationError as e:
        raise _configuration_error(e) from e


def config_hash(config: RunConfig) -> str:
    """规范 JSON（sort_keys）上的 sha256"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_payload(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")
