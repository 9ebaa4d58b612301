import markdown
import argparse
import logging
import sys

from core import ParseError, SpauditError, atomic_write

logger = logging.getLogger('spaudit.report')

# Light theme with readable tables; spurious rows are tagged in the text, not by color.
CSS_STYLE = """
    <style>
        body {
            background-color: #fbfbf8;
            font-family: Arial, sans-serif;
            color: #1a1a1a;
            line-height: 1.5;
            margin: 0;
            padding: 2em;
        }
        .container {
            max-width: 1000px;
            margin: 0 auto;
            background-color: #ffffff;
            padding: 2em;
            border-radius: 6px;
            box-shadow: 0 2px 6px rgba(0,0,0,0.08);
        }
        h1, h2, h3 {
            color: #234e70;
            border-bottom: 1px solid #e3e3e3;
            padding-bottom: 4px;
        }
        table {
            border-collapse: collapse;
            margin: 1em 0;
            font-size: 0.9em;
        }
        th, td {
            border: 1px solid #d0d0d0;
            padding: 4px 8px;
            text-align: right;
        }
        th {
            background-color: #eef3f7;
        }
        td:first-child, th:first-child {
            text-align: left;
        }
        strong, b {
            color: #9c2f2f;
        }
        img {
            max-width: 480px;
        }
        code {
            font-family: 'Courier New', Courier, monospace;
            background-color: #f1f1f1;
            padding: 1px 4px;
        }
        hr {
            border: 0;
            border-top: 1px solid #c8c8c8;
            margin: 2em 0;
        }
    </style>
"""


def markdown_to_html(md_text: str, title: str = "spaudit report") -> str:
    """Markdown (with tables) wrapped in a standalone styled HTML page."""
    html_content = markdown.markdown(md_text, extensions=['tables'])
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{title}</title>
    {CSS_STYLE}
</head>
<body>
    <div class="container">
        {html_content}
    </div>
</body>
</html>
"""


def convert_markdown_to_html(input_file: str, output_file: str, title: str = "spaudit report"):
    try:
        with open(input_file, 'r', encoding='utf-8') as f:
            md_text = f.read()
    except FileNotFoundError:
        raise ParseError("Markdown input not found", path=input_file)

    with atomic_write(output_file) as f:
        f.write(markdown_to_html(md_text, title))
    logger.info(f"Converted '{input_file}' to '{output_file}'")


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description="Convert a Markdown audit report to a styled HTML page.")
    parser.add_argument("input_file", help="The path to the input Markdown file.")
    parser.add_argument("output_file", help="The path for the output HTML file.")
    args = parser.parse_args()

    try:
        convert_markdown_to_html(args.input_file, args.output_file)
    except SpauditError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
