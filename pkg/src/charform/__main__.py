import sys

from charform.cli import main

sys.exit(main())
