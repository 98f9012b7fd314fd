"""Background prompting for object depth, built on a small numpy autodiff engine.

Modules: ``gradcore`` (autodiff), ``synthscene`` (ray-cast dataset),
``depthnet`` (U-Net depth predictor), ``prompting`` (background prompts and
their learning), ``evalkit`` (metrics and reports) and ``cli``.
"""

__version__ = "0.1.0"
