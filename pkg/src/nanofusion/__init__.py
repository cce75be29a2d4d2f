"""Camera + multi-zone depth fusion for drone-relative human pose estimation.

Modules: ``nn`` (layer engine), ``models`` (the seven variants),
``scenegen`` / ``augment`` / ``dataset`` (synthetic data), ``train``,
``quant`` / ``tiling`` / ``formats`` (int8 deployment), ``closedloop``
(tracking simulation), ``config`` / ``cli`` (pipeline).
"""

__version__ = "0.1.0"
