"""Trace-driven simulator and scheduling library for speculative
mixture-of-experts decoding with expert offloading.

The heavy lifting lives in the compiled ``_moespeq`` extension; this package
re-exports its public surface.
"""

try:
    # Installed layout: the extension is placed inside this package.
    from ._moespeq import *  # noqa: F401,F403
    from . import _moespeq as _impl
except ImportError:
    # Build-tree layout: the extension sits next to the package on sys.path.
    from _moespeq import *  # noqa: F401,F403
    import _moespeq as _impl

__all__ = [name for name in dir(_impl) if not name.startswith("_")]
__version__ = "0.1.0"
