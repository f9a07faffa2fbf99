from .cli_experiments import main

raise SystemExit(main())
