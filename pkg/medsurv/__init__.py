"""
medsurv - 竞争风险下纵向中介的自然效应分析 (Python 版)

功能:
- 短格式纵向数据的校验与计数过程重塑
- 暴露、纵向中介与删失的逆概率权重
- 加权自然效应病因别 Cox 模型与 TE/DE/IE 风险比分解
- 非参数 bootstrap 区间与反事实累积发生率
- 离散时间数据生成过程与枚举真值 oracle
"""

__version__ = "1.0.0"
