import sys

from fedbed.cli import main

sys.exit(main())
