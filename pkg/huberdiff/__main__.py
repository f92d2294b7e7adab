import sys

from huberdiff.harness.cli import main

sys.exit(main())
