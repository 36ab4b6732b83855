import sys

from markbox.cli import main

sys.exit(main())
