from setuptools import setup, find_packages

setup(
    name="verifact",
    version="0.1.0",
    packages=find_packages(include=["app", "app.*"]),
    package_data={"app": ["prompts/*.jinja2"]},
    py_modules=["main"],
    install_requires=[
        "openai>=1.40.0",
        "httpx>=0.27.0",
        "python-dotenv>=1.0.0",
        "pydantic>=2.5.0",
        "jinja2>=3.1.2",
        "pandas>=2.2.0",
        "numpy>=1.26.0",
    ],
    entry_points={"console_scripts": ["verifact=main:main"]},
)
