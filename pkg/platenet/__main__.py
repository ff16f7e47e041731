from platenet.main import cli_main

cli_main()
