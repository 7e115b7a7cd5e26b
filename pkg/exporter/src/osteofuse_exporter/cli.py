"""CLI for the backbone exporter."""

from __future__ import annotations

import click

from .export import ZOO, export


@click.command()
@click.option("--model", "names", required=True, multiple=True,
              type=click.Choice(sorted(ZOO) + ["all"]),
              help="backbone to export (repeatable), or 'all'")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--weights", type=click.Choice(["pretrained", "random"]),
              default="pretrained", show_default=True,
              help="'random' skips the zoo download (machinery testing)")
@click.option("--weights-path", type=click.Path(exists=True), default=None,
              help="local state-dict file instead of downloading")
@click.option("--seed", type=int, default=0, show_default=True,
              help="initialization seed for --weights random")
def main(names, out_dir, weights, weights_path, seed):
    """Export truncated backbones plus manifests for the runtime."""
    targets = sorted(ZOO) if "all" in names else list(dict.fromkeys(names))
    for name in targets:
        result = export(name, out_dir, weights=weights,
                        weights_path=weights_path, seed=seed)
        click.echo(
            f"{name}: dim {result.feature_dim}, "
            f"min probe cosine {min(result.parity_cosines):.6f} -> "
            f"{result.model_path.name} + {result.manifest_path.name}"
        )


if __name__ == "__main__":
    main()
