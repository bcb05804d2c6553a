"""Co-design of multi-hop forwarding policies and LQG controllers under packet loss."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
