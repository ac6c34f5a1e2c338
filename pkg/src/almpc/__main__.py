import sys

from almpc.cli import main

sys.exit(main())
