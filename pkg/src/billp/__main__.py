import sys

from billp.harness.cli import main

sys.exit(main())
