# Importing the families registers them with codes.build_code.
from feedback_code_toolkit import light_bc, rpc_bc  # noqa: F401
