"""Distributed off-policy gradient TD learning (GTD2/TDC with eligibility traces
and consensus mixing), with exact limit-point analysis and a simulation harness."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0+unknown"
