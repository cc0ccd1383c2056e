import sys

from rfsoftmax.cli import main

sys.exit(main())
