"""Selective fine-tuning of small convolutional networks on WMNIST."""
import os

# prefer OpenMP for numba's parallel loops; the bundled TBB may be too old
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

__version__ = "0.1.0"
