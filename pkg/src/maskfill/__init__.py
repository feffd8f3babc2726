"""maskfill: learned observation-mask priors and context-query training
for reconstructing gridded fields from incomplete observations."""

__version__ = "0.1.0"
