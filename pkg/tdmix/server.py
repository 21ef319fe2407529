"""tdmix MCP Server implementation."""

import argparse
import logging
import os
from typing import List, Optional

# Configure logging
logging.basicConfig(
    level=os.getenv("TDMIX_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

from mcp.server.fastmcp import FastMCP

from shared.types import MCPResponse
from tdmix import chain, depend
from tdmix.config import DEFAULT_OUTPUT_DIR, default_threads, load_config
from tdmix.pipeline import STAGES, build_report, run_pipeline
from tdmix.seeding import derive_seeds


class TdMixMCPServer:
    """MCP Server exposing TD(0) studies and their mixing diagnostics."""

    def __init__(self):
        """Initialize the tdmix MCP server."""
        self.output_dir = os.getenv("TDMIX_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)
        self.threads = default_threads()

        log_level = os.getenv("TDMIX_LOG_LEVEL", "INFO").upper()
        self.app = FastMCP(
            "tdmix",
            debug=log_level == "DEBUG",
            json_response=True,
            host=os.getenv("MCP_HOST", "127.0.0.1"),
            port=int(os.getenv("MCP_PORT", "8001")),
            log_level=log_level,
        )
        self._register_tools()

    def _register_tools(self):
        """Register all MCP tools."""

        @self.app.tool()
        async def run_study(
            config_path: str,
            out_dir: Optional[str] = None,
            stages: Optional[List[str]] = None,
        ) -> MCPResponse:
            """Run a study from an experiment JSON file and return its diagnostic lines.

            Args:
                config_path: Path to the experiment JSON file
                out_dir: Artifact directory (defaults to the config's output_dir)
                stages: Subset of stages to run (simulate, train, decompose, mixing,
                    couple, blocks, crossings, rates); all when omitted
            """
            try:
                logger.info(f"Running study from {config_path}")
                unknown = sorted(set(stages or []) - set(STAGES))
                if unknown:
                    raise ValueError(f"Unknown stages: {', '.join(unknown)}")
                config = load_config(config_path)
                target = out_dir or config.output_dir
                report = run_pipeline(config, target, threads=self.threads, stages=stages)
                return MCPResponse(
                    success=True,
                    data={"out_dir": str(target), **report.model_dump(mode="json")},
                )
            except Exception as e:
                logger.error(f"Failed to run study: {e}")
                return MCPResponse(success=False, error=str(e))

        @self.app.tool()
        async def mixing(
            kappa: float = 2.5,
            n_states: int = 200,
            t_min: int = 5,
            t_max: int = 80,
        ) -> MCPResponse:
            """Exact TV decay of a truncated renewal chain from state 0, with its power-law fit.

            Args:
                kappa: Tail index of the renewal jump law (P(J = j) ~ j^-(kappa+1))
                n_states: Number of states of the truncated chain
                t_min: First lag of the fit window
                t_max: Last lag of the fit window
            """
            try:
                logger.info(f"Computing mixing curve for kappa={kappa}, n_states={n_states}")
                kernel = chain.make_renewal_chain(kappa, n_states)
                lags = depend.lag_grid(1, 2 * t_max)
                estimate = depend.tv_mixing(kernel, 0, lags, (t_min, t_max))
                return MCPResponse(
                    success=True,
                    data={
                        "lags": estimate.lags.tolist(),
                        "tv": estimate.values.tolist(),
                        "regime": estimate.regime.value,
                        "exponent": estimate.fit.exponent if estimate.fit else None,
                        "r_squared": estimate.fit.r_squared if estimate.fit else None,
                    },
                )
            except Exception as e:
                logger.error(f"Failed to compute mixing curve: {e}")
                return MCPResponse(success=False, error=str(e))

        @self.app.tool()
        async def couple(
            kappa: float = 2.5,
            n_states: int = 200,
            T: int = 200,
            n_seeds: int = 2000,
            base_seed: int = 0,
        ) -> MCPResponse:
            """Maximal coupling of two copies of a renewal chain started at 0 and n_states - 1.

            Args:
                kappa: Tail index of the renewal jump law
                n_states: Number of states of the truncated chain
                T: Horizon of each coupled pair
                n_seeds: Number of independent coupled pairs
                base_seed: Base seed the pair seeds are derived from
            """
            try:
                logger.info(f"Coupling renewal chain kappa={kappa} over {n_seeds} pairs")
                kernel = chain.make_renewal_chain(kappa, n_states)
                seeds = derive_seeds(base_seed, "coupling", n_seeds)
                report = depend.coupling_study(kernel, 0, n_states - 1, T, seeds)
                return MCPResponse(success=True, data=report.model_dump(mode="json"))
            except Exception as e:
                logger.error(f"Failed to couple chains: {e}")
                return MCPResponse(success=False, error=str(e))

        @self.app.tool()
        async def report(out_dir: Optional[str] = None) -> MCPResponse:
            """Aggregate the diagnostics already written to an artifact directory.

            Args:
                out_dir: Artifact directory (defaults to TDMIX_OUTPUT_DIR)
            """
            try:
                target = out_dir or self.output_dir
                logger.info(f"Building report for {target}")
                study = build_report(target)
                return MCPResponse(
                    success=True,
                    data={"failed": study.failed, **study.model_dump(mode="json")},
                )
            except Exception as e:
                logger.error(f"Failed to build report: {e}")
                return MCPResponse(success=False, error=str(e))


TRANSPORTS = ("stdio", "sse", "streamable-http")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdmix-mcp-server", description="tdmix MCP server")
    parser.add_argument(
        "--transport",
        choices=TRANSPORTS,
        default=os.getenv("MCP_TRANSPORT", "stdio"),
        help="MCP transport (default: MCP_TRANSPORT or stdio)",
    )
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    """Entry point for the tdmix MCP server."""
    args = build_parser().parse_args(argv)
    server = TdMixMCPServer()
    logger.info(f"Starting tdmix MCP server over {args.transport}")
    server.app.run(transport=args.transport)


if __name__ == "__main__":
    main()
