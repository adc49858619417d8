"""数值引擎: 设计矩阵、Newton 求解器、多项 logistic 与加权 Cox 模型"""
