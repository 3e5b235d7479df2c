"""Train the generative model on a corpus directory and export the decoder."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bvae import BvaeConfig, train_bvae
from .data import load_corpus_images
from .export import export_parity_fixtures, export_weights, write_training_curves
from .wgan import WganConfig, critic_gap, finetune_wgan_gp


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="veintrainer", description=__doc__)
    parser.add_argument("--corpus", required=True, help="corpus directory to train on")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--latent-dim", type=int, default=24)
    parser.add_argument("--gamma", type=float, default=2.0)
    parser.add_argument("--c-max", type=float, default=10.0)
    parser.add_argument("--c-warmup-steps", type=int, default=10000)
    parser.add_argument("--vae-epochs", type=int, default=200)
    parser.add_argument("--vae-lr", type=float, default=1e-3)
    parser.add_argument("--adv-epochs", type=int, default=20)
    parser.add_argument("--penalty-weight", type=float, default=10.0)
    parser.add_argument("--skip-adversarial", action="store_true")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    images = load_corpus_images(args.corpus)
    print(f"training on {images.shape[0]} desk-scale images")
    bcfg = BvaeConfig(
        latent_dim=args.latent_dim,
        gamma=args.gamma,
        c_max=args.c_max,
        c_warmup_steps=args.c_warmup_steps,
        lr=args.vae_lr,
        epochs=args.vae_epochs,
        seed=args.seed,
    )
    encoder, decoder, bvae_history = train_bvae(images, bcfg)
    print(f"vae stage done (reconstruction {bvae_history['reconstruction'][-1]:.4f})")

    wgan_history = None
    if not args.skip_adversarial:
        wcfg = WganConfig(
            penalty_weight=args.penalty_weight, epochs=args.adv_epochs, seed=args.seed
        )
        decoder, critic, wgan_history = finetune_wgan_gp(encoder, decoder, images, wcfg)
        print(f"adversarial stage done (critic gap {critic_gap(critic, encoder, decoder, images):+.4f})")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_weights(decoder, out / "decoder.vfw1")
    export_parity_fixtures(decoder, out / "parity.json")
    write_training_curves(out / "training_curves.csv", bvae_history, wgan_history)
    print(f"decoder written to {out/'decoder.vfw1'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
