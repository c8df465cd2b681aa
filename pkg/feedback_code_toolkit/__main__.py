import sys

from feedback_code_toolkit.cli import main

sys.exit(main())
