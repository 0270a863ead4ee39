import sys

from dpjl.cli import main

sys.exit(main())
