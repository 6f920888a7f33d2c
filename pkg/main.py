import sys
import traceback

from cli.parsers import create_parser
from cli.commands import handle_command
from config.settings import EXIT_IO, EXIT_OK, EXIT_USAGE
from utils.errors import CompressionError


def main(argv=None):
    parser = create_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        sys.exit(EXIT_USAGE)

    try:
        handle_command(args)
    except CompressionError as e:
        if args.debug:
            traceback.print_exc()
        print(f"Error: {str(e)}")
        sys.exit(e.exit_code)
    except OSError as e:
        if args.debug:
            traceback.print_exc()
        print(f"Error: {str(e)}")
        sys.exit(EXIT_IO)
    except Exception as e:
        if args.debug:
            traceback.print_exc()
        print(f"Error: {str(e)}")
        sys.exit(EXIT_USAGE)
    sys.exit(EXIT_OK)


if __name__ == '__main__':
    main()
