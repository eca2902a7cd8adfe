"""glueforge: 模型合併與 MoE 組裝工具"""

__version__ = "0.1.0"
