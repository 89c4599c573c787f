import sys

from diddml.cli import main

sys.exit(main())
