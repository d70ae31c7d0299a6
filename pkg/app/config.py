"""
环境配置 - 只影响文件路径、日志和并行度, 不影响数值结果

实验参数 (模型/边界/控制器/CIS/仿真) 见 app/utils/experiment_config.py
"""
import os

from dotenv import load_dotenv

load_dotenv()

# ========================
# 服务配置
# ========================
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
ZMPC_CONFIG = os.getenv("ZMPC_CONFIG", "")           # 空 = 使用内置默认配置
ZMPC_OUTPUT_DIR = os.getenv("ZMPC_OUTPUT_DIR", "runs")
ZMPC_CIS_CACHE_DIR = os.getenv("ZMPC_CIS_CACHE_DIR", "cis_cache")

# 独立闭环仿真 (种子 / gamma) 的并行进程数
ZMPC_N_JOBS = int(os.getenv("ZMPC_N_JOBS", "1"))
