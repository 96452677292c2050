import sys

from tzperiph.cli import main

sys.exit(main())
