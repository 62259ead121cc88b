"""Reference wire-protocol backend service.

Mock mode is a from-scratch implementation of the scripted generators in
PROTOCOL.md; it shares no code with the pipeline package and must stay that
way, since byte-equal conformance is what proves the protocol document
complete. Adapter mode forwards to a user-supplied model stack.
"""

__version__ = "0.1.0"
