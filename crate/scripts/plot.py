"""Plot learn.csv and campaign.csv written by the gridsnoop CLI.

    python scripts/plot.py out/learn.csv out/seed-1/campaign.csv
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd


def plot_learn(path: Path, ax) -> None:
    df = pd.read_csv(path)
    med = df.groupby("T")["r_p"].median()
    ax.plot(med.index, med.values, marker="o", label="median r_p")
    ax.axhline(df["alarm"].iloc[0], color="k", ls="--", label="operator alarm")
    ax.set_xlabel("training snapshots T")
    ax.set_ylabel("pseudo-residual")
    ax.set_yscale("log")
    ax.legend()


def plot_campaign(path: Path, ax) -> None:
    df = pd.read_csv(path)
    ax.plot(df["t"], df["operator_r"], lw=0.8, label="operator r")
    ax.plot(df["t"], df["r_p"], lw=0.8, label="attacker r_p")
    ax.plot(df["t"], df["tau_hat"], ls="--", label="tau_hat")
    launched = df[df["launched"] == 1]
    ax.scatter(launched["t"], launched["operator_r"], s=6, c="r", label="launched")
    ax.set_xlabel("minute")
    ax.set_ylabel("residual")
    ax.legend()


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("learn", type=Path, nargs="?")
    parser.add_argument("campaign", type=Path, nargs="?")
    parser.add_argument("--out", type=Path, default=Path("figures.png"))
    args = parser.parse_args()
    panels = [p for p in (args.learn, args.campaign) if p is not None]
    if not panels:
        parser.error("give learn.csv and/or campaign.csv")
    fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 4), squeeze=False)
    col = 0
    if args.learn is not None:
        plot_learn(args.learn, axes[0][col])
        col += 1
    if args.campaign is not None:
        plot_campaign(args.campaign, axes[0][col])
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)


if __name__ == "__main__":
    main()
