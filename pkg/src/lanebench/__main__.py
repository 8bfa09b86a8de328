import sys

from lanebench.cli import main

sys.exit(main())
