"""
mkvlab command line

    mkvlab simulate   --config FILE [--out DIR] [--seed N]
    mkvlab picard     --config FILE [--out DIR] [--seed N]
    mkvlab metrics    --config FILE [--out DIR]
    mkvlab experiment [run] SCENARIO --config FILE [--out DIR] [--seed N]

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 acceptance failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from cli_io import COMMANDS, dispatch, parse_config
from errors import ConfigError, MkvlabError
from experiments import SCENARIOS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mkvlab', description='McKean-Vlasov SDE laboratory')
    commands = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        if name == 'experiment':
            sub.add_argument('words', nargs='*', metavar='SCENARIO', help=f"optional 'run', then one of {', '.join(SCENARIOS)}")
        sub.add_argument('--config', type=Path, required=True, help='TOML run configuration')
        sub.add_argument('--out', type=Path, default=None, help='output directory')
        sub.add_argument('--seed', type=int, default=None, help='override the config seed')
        sub.add_argument('--verbose', action='store_true', help='debug logging')
    return parser


def _scenario(words: List[str]) -> Optional[str]:
    if words and words[0] == 'run':
        words = words[1:]
    if len(words) > 1:
        raise ConfigError(f"expected at most one scenario, got {words}")
    return words[0] if words else None


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        scenario = _scenario(args.words) if args.command == 'experiment' else None
        config = parse_config(args.config, command=args.command, seed=args.seed, out=args.out, scenario=scenario)
    except MkvlabError as exc:
        print(f"❌ {exc}")
        return exc.exit_code

    print(f"📊 {config.command}{' ' + config.scenario if config.scenario else ''}: "
          f"config {config.config_hash[:12]}, seed {config.seed}")
    code, manifest = dispatch(config)
    if code == 0:
        print(f"✅ Done: {config.out} ({len(manifest.files)} files)")
    elif code == 4:
        print(f"⚠️ Acceptance failed: {manifest.error['message']} (outputs in {config.out})")
    else:
        print(f"❌ {manifest.error['type']}: {manifest.error['message']}")
    return code


if __name__ == '__main__':
    sys.exit(main())
