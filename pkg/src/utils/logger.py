"""日誌設定模組"""

import os
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from src.utils.config_loader import get_config


def setup_logger(
    log_dir: Optional[str] = None,
    level: Optional[str] = None,
    rotation: Optional[str] = None,
    retention: Optional[str] = None,
    console: bool = True
):
    """
    設定全局日誌

    Args:
        log_dir: 日誌目錄 (預設讀取 GLUEFORGE_LOG_DIR, 否則 "logs")
        level: 日誌等級 (DEBUG, INFO, WARNING, ERROR), 預設讀取 GLUEFORGE_LOG_LEVEL 或 logging.level
        rotation: 日誌切割大小 (預設 logging.rotation)
        retention: 日誌保留時間 (預設 logging.retention)
        console: 是否輸出到 console

    Returns:
        loguru logger
    """
    logging_config = get_config().get_logging_config()
    log_dir = log_dir or os.getenv("GLUEFORGE_LOG_DIR", "logs")
    level = (level or logging_config.get("level", "INFO")).upper()
    rotation = rotation or logging_config.get("rotation", "100 MB")
    retention = retention or logging_config.get("retention", "30 days")

    # 建立日誌目錄
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)

    # 移除預設 handler
    logger.remove()

    # console handler 輸出到 stderr
    if console:
        logger.add(
            sys.stderr,
            level=level,
            format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>",
            colorize=True
        )

    # 添加 file handler
    logger.add(
        log_path / "glueforge.log",
        level=level,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        rotation=rotation,
        retention=retention,
        encoding="utf-8"
    )

    logger.debug(f"日誌系統已初始化: {log_path.absolute()}")

    return logger
