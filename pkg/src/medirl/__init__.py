"""Maximum-entropy deep IRL for driver fixation scanpaths."""

__version__ = "0.1.0"
