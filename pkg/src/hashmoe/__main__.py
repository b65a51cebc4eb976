import sys

from hashmoe.cli import main

sys.exit(main())
