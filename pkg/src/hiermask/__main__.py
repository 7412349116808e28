import sys

from hiermask.cli import main

sys.exit(main())
