"""配置載入模組"""

import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

# 專案根目錄下的 config/ (不依賴目前工作目錄)
DEFAULT_CONFIG_DIR = Path(__file__).resolve().parent.parent.parent / "config"


class ConfigLoader:
    """配置載入器"""

    def __init__(self, config_dir: Optional[str] = None):
        # 載入環境變數
        load_dotenv()

        self.config_dir = Path(config_dir or os.getenv("GLUEFORGE_CONFIG_DIR") or DEFAULT_CONFIG_DIR)
        self._configs = {}

    def load_yaml(self, filename: str) -> Dict[str, Any]:
        """
        載入 YAML 配置檔

        Args:
            filename: 配置檔名 (例如: "glueforge.yaml")

        Returns:
            配置字典
        """
        if filename in self._configs:
            return self._configs[filename]

        config_path = self.config_dir / filename

        if not config_path.exists():
            raise FileNotFoundError(f"配置檔不存在: {config_path}")

        with open(config_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f) or {}

        self._configs[filename] = config
        return config

    def get_env(self, key: str, default: Any = None) -> Any:
        """
        取得環境變數

        Args:
            key: 環境變數名稱
            default: 預設值

        Returns:
            環境變數值
        """
        return os.getenv(key, default)

    def _section(self, name: str) -> Dict[str, Any]:
        return dict(self.load_yaml("glueforge.yaml").get(name, {}))

    def get_checkpoint_config(self) -> Dict[str, Any]:
        """取得 checkpoint 配置"""
        return self._section("checkpoint")

    def get_similarity_defaults(self) -> Dict[str, Any]:
        """取得相似度/分群預設值"""
        return self._section("similarity")

    def get_merge_defaults(self) -> Dict[str, Any]:
        """取得合併核心預設值"""
        return self._section("merge")

    def get_search_defaults(self) -> Dict[str, Any]:
        """取得係數搜尋預設值"""
        return self._section("search")

    def get_toy_defaults(self) -> Dict[str, Any]:
        """取得 toy 模型預設值"""
        return self._section("toy")

    def get_mixture_defaults(self) -> Dict[str, Any]:
        """取得 MoE 組裝預設值"""
        return self._section("mixture")

    def get_glue_defaults(self) -> Dict[str, Any]:
        """取得 glue 流程預設值"""
        return self._section("glue")

    def get_logging_config(self) -> Dict[str, Any]:
        """取得日誌配置 (環境變數優先)"""
        logging_config = self._section("logging")
        env_level = self.get_env("GLUEFORGE_LOG_LEVEL")
        if env_level:
            logging_config["level"] = env_level
        return logging_config

    def get_role_patterns(self, scheme: str = "llama") -> List[Dict[str, str]]:
        """
        取得張量命名 → 角色對應規則

        Args:
            scheme: 命名規則名稱 (llama, gpt2)

        Returns:
            規則列表 [{'pattern': ..., 'role': ...}, ...]
        """
        roles_config = self.load_yaml("roles.yaml")
        schemes = roles_config.get('schemes', {})

        if scheme not in schemes:
            raise ValueError(f"未知的命名規則: {scheme}")

        return list(schemes[scheme])


_default_loader: Optional[ConfigLoader] = None


def get_config() -> ConfigLoader:
    """取得共用的 ConfigLoader (延遲建立)"""
    global _default_loader
    if _default_loader is None:
        _default_loader = ConfigLoader()
    return _default_loader
