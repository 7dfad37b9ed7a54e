"""Input-dependent prompt generation for frozen vision transformers, in numpy.

Submodules are imported on demand so that the inference server never loads the
prompt generator.
"""

__version__ = "0.1.0"
