import sys

from persona_agent.cli import main

sys.exit(main())
