from .kernels import BACKEND_NAME

__version__ = "0.1.0"
