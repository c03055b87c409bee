import sys

from roivqa.cli import main

sys.exit(main())
