"""Seeded train/val splits and the nested halving subsets used for the data-size study."""
from pdfnet.data import halving_subsets, seeded_split


def main():
    plan = seeded_split(2975, [None], seed=42)
    subsets = halving_subsets(plan.parts[0], 5)
    print("cityscapes train subsets:", [len(s) for s in subsets])
    # each subset is a prefix of the one before it
    print("nested:", all(a[: len(b)] == b for a, b in zip(subsets, subsets[1:])))
    print("first ids of the smallest:", subsets[-1][:8])

    camvid = halving_subsets(list(range(367)), 3, first=0)
    print("camvid train subsets:", [len(s) for s in camvid])

    split = seeded_split(100, [70, 15, None], seed=1)
    print("70/15/rest split sizes:", split.sizes)


if __name__ == "__main__":
    main()
