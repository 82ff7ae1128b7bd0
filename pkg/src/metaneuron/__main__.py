import sys

from metaneuron.cli import main

sys.exit(main())
