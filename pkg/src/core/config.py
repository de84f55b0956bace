"""設定管理モジュール"""
import json
from pathlib import Path
from typing import Any, Dict, List, Tuple, Type, Union

from pydantic import Field
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict


class Settings(BaseSettings):
    """アプリケーション設定

    環境変数は読まない。値は初期化引数か --config のJSONファイルのみから与える。
    """

    model_config = SettingsConfigDict(extra="forbid", validate_assignment=True)

    # 実行設定
    seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: str = Field(default="out")
    log_level: str = Field(default="INFO")
    schema_version: int = Field(default=1)
    max_workers: int = Field(default=1, ge=1)

    # 神経素子シミュレーション設定
    hh_dt: float = Field(default=0.01, gt=0)
    spike_threshold: float = Field(default=0.0)
    refractory_ms: float = Field(default=2.0, ge=0)
    transient_ms: float = Field(default=50.0, ge=0)
    rate_window_ms: float = Field(default=500.0, gt=0)

    # 区分連続性チェック設定
    jump_tol_fraction: float = Field(default=1e-3, gt=0)
    refine_depth: int = Field(default=24, ge=1)
    min_grid: int = Field(default=16, ge=2)
    level_fractions: List[float] = Field(
        default=[0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875]
    )
    neighborhood_fraction: float = Field(default=0.25, gt=0)
    attain_fraction: float = Field(default=1e-9, gt=0)
    plateau_cells: int = Field(default=16, ge=1)

    # 近似器設定
    elm_ridge: float = Field(default=1e-8, ge=0)
    elm_hidden_scale: float = Field(default=1.0, gt=0)
    elm_initial_hidden: int = Field(default=8, ge=1)
    elm_max_hidden: int = Field(default=512, ge=1)
    bp_hidden: int = Field(default=32, ge=1)
    bp_alpha: float = Field(default=0.05, gt=0)
    bp_max_epochs: int = Field(default=2000, ge=0)
    bp_check_every: int = Field(default=10, ge=1)

    # 回路設定
    lipschitz_inflation: float = Field(default=1.1, ge=1.0)
    mc_trials: int = Field(default=200, ge=1)
    mc_steps: int = Field(default=32, ge=1)
    mc_hold: int = Field(default=4, ge=1)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    def echo(self, *names: str) -> Dict[str, Any]:
        """レポートに記録する設定値を返す"""
        data = self.model_dump()
        if not names:
            return data
        return {name: data[name] for name in names}


def load_settings(path: Union[str, Path, None] = None, **overrides: Any) -> Settings:
    """JSON設定ファイルと上書き値からSettingsを構築"""
    values: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            values.update(json.load(f))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Settings(**values)


def apply_settings(new: Settings) -> Settings:
    """シングルトンの値を new で置き換える（モジュール間で同じインスタンスを共有するため）"""
    for name in Settings.model_fields:
        setattr(settings, name, getattr(new, name))
    return settings


# シングルトンインスタンス
settings = Settings()
