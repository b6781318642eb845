import sys

from fairdolce.cli import main

sys.exit(main())
