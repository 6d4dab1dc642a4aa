"""Channel-attention residual networks on a pure-numpy substrate.

Submodules are imported explicitly (`from lctnet import attention`, ...) so
the command-line front end can configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
