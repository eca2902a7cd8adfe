#!/usr/bin/env python3
"""
glueforge 命令列入口

用法:
    python scripts/glueforge.py toy-model --out zoo/base --seed 0
    python scripts/glueforge.py glue --config glue.json --out runs/glue
"""

import sys
from pathlib import Path

# 加入專案根目錄到 Python 路徑
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
