"""Off-policy evaluation of post-dropout policies in factored MDPs."""

__version__ = "0.1.0"
