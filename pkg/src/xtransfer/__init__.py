"""Layer-wise model repair and resource-constrained layer recombination.

Modules: ``zoo`` (source models and L-units), ``stats`` (channel
magnitudes, silhouette), ``anchor`` (anchor PCA space and alignment),
``srr`` (connectors, repair, channel removal), ``lws`` (layer-wise search
and recombined models), ``bench`` (synthetic benchmark, baselines,
metrics), ``serialize``/``config``/``runner``/``cli`` (artifact I/O).
"""
__version__ = "0.1.0"
