"""oodkit: design toolkit for deep out-of-distribution detectors.

Four phases: tune a detector's preprocessing pipeline with bucketed genetic
algorithms, quantize it, deploy it onto an in-process callback-graph executor,
and verify AUROC / response-time / throughput requirements.
"""

__version__ = "0.1.0"
